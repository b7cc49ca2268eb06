//! Named parameter containers and their tape bindings.

use crate::autodiff::{Gradients, Var};
use crate::tensor::Tensor;

/// A fixed, ordered collection of named tensors.
pub trait ParamSet {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>);
    fn visit_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor>);

    fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        self.visit("", &mut out);
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        self.visit_mut(&mut out);
        out
    }

    /// Exact scalar count, by enumeration of every tensor.
    fn count_params(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.numel()).sum()
    }
}

/// Tape handles for a bound [`ParamSet`], in visit order.
pub trait BoundSet {
    fn vars(&self, out: &mut Vec<Var>);

    fn var_list(&self) -> Vec<Var> {
        let mut out = Vec::new();
        self.vars(&mut out);
        out
    }

    fn grads<'g>(&self, grads: &'g Gradients) -> Vec<Option<&'g Tensor>> {
        self.var_list().into_iter().map(|v| grads.get(v)).collect()
    }
}

impl<T: ParamSet> ParamSet for Vec<T> {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        for (i, p) in self.iter().enumerate() {
            p.visit(&format!("{prefix}{i}."), out);
        }
    }

    fn visit_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor>) {
        for p in self.iter_mut() {
            p.visit_mut(out);
        }
    }
}

impl<T: BoundSet> BoundSet for Vec<T> {
    fn vars(&self, out: &mut Vec<Var>) {
        for b in self {
            b.vars(out);
        }
    }
}

/// Declares a flat parameter group and its tape-bound mirror.
macro_rules! param_group {
    ($(#[$m:meta])* $name:ident, $bound:ident { $($field:ident),+ $(,)? }) => {
        $(#[$m])*
        #[derive(Clone, Debug, PartialEq)]
        pub struct $name {
            $(pub $field: $crate::tensor::Tensor,)+
        }

        #[derive(Clone, Copy, Debug)]
        pub struct $bound {
            $(pub $field: $crate::autodiff::Var,)+
        }

        impl $name {
            pub fn bind(&self, tape: &mut $crate::autodiff::Tape, trainable: bool) -> $bound {
                $bound { $($field: tape.leaf(self.$field.clone(), trainable),)+ }
            }
        }

        impl $crate::params::ParamSet for $name {
            fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a $crate::tensor::Tensor)>) {
                $(out.push((format!("{prefix}{}", stringify!($field)), &self.$field));)+
            }

            fn visit_mut<'a>(&'a mut self, out: &mut Vec<&'a mut $crate::tensor::Tensor>) {
                $(out.push(&mut self.$field);)+
            }
        }

        impl $crate::params::BoundSet for $bound {
            fn vars(&self, out: &mut Vec<$crate::autodiff::Var>) {
                $(out.push(self.$field);)+
            }
        }
    };
}

pub(crate) use param_group;

/// Bitwise comparison of two parameter sets.
pub fn bit_identical<P: ParamSet>(a: &P, b: &P) -> bool {
    let (na, nb) = (a.named_tensors(), b.named_tensors());
    na.len() == nb.len()
        && na
            .iter()
            .zip(&nb)
            .all(|((x, tx), (y, ty))| x == y && tx.bit_eq(ty))
}

/// SHA-256 over names, shapes and little-endian values.
pub fn digest<P: ParamSet + ?Sized>(p: &P) -> String {
    let mut bytes = Vec::new();
    for (name, t) in p.named_tensors() {
        bytes.extend_from_slice(name.as_bytes());
        for d in t.shape() {
            bytes.extend_from_slice(&(*d as u64).to_le_bytes());
        }
        for v in t.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    crate::rng::sha256_hex(&bytes)
}
