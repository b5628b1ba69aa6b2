//! Uniform access to named trainable tensors.

use zsl_tensor::Tensor;

pub trait ParamVisitor {
    fn visit(&mut self, name: &str, t: &mut Tensor);
}

impl<F: FnMut(&str, &mut Tensor)> ParamVisitor for F {
    fn visit(&mut self, name: &str, t: &mut Tensor) {
        self(name, t)
    }
}
