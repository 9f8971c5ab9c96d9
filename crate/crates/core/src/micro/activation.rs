use crate::{Tape, Var};

use super::Activation;

/// Slope of the LeakyReLU activation candidate.
pub const LEAKY_RELU_SLOPE: f64 = 0.01;

pub fn activation_apply(tape: &mut Tape, kind: Activation, x: Var) -> Var {
    match kind {
        Activation::None => x,
        Activation::Sigmoid => tape.sigmoid(x),
        Activation::Tanh => tape.tanh(x),
        Activation::Softplus => tape.softplus(x),
        Activation::Relu => tape.relu(x),
        Activation::LeakyRelu => tape.leaky_relu(x, LEAKY_RELU_SLOPE),
        Activation::Relu6 => tape.relu6(x),
        Activation::Elu => tape.elu(x),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Tensor;

    fn eval(kind: Activation, x: f64) -> f64 {
        let mut tape = Tape::new();
        let v = tape.constant(Tensor::scalar(x));
        let y = activation_apply(&mut tape, kind, v);
        tape.value(y).item().unwrap()
    }

    #[test]
    fn closed_forms() {
        assert_eq!(eval(Activation::Relu6, 7.0), 6.0);
        assert_eq!(eval(Activation::Elu, 0.0), 0.0);
        assert!((eval(Activation::Elu, -(2f64.ln())) + 0.5).abs() < 1e-15);
        assert_eq!(eval(Activation::LeakyRelu, -2.0), -0.02);
    }

    #[test]
    fn all_kinds_at_one_half() {
        let x: f64 = 0.5;
        let expected = [
            (Activation::None, 0.5),
            (Activation::Sigmoid, 1.0 / (1.0 + (-x).exp())),
            (
                Activation::Tanh,
                (x.exp() - (-x).exp()) / (x.exp() + (-x).exp()),
            ),
            (Activation::Softplus, (1.0 + x.exp()).ln()),
            (Activation::Relu, 0.5),
            (Activation::LeakyRelu, 0.5),
            (Activation::Relu6, 0.5),
            (Activation::Elu, 0.5),
        ];
        for (kind, want) in expected {
            assert!((eval(kind, x) - want).abs() < 1e-15, "{kind}");
        }
    }
}
