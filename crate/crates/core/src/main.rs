fn main() {
    std::process::exit(i2i_core::cli::main_with_args(std::env::args_os()));
}
