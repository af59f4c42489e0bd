use serde::{Deserialize, Serialize};

use crate::tensor::{Real, Tensor4};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Softplus,
    Sigmoid,
}

#[inline]
pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[inline]
pub fn softplus<T: Real>(x: T) -> T {
    // ln(1 + e^x) = max(x, 0) + ln(1 + e^-|x|)
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

impl Activation {
    #[inline]
    pub fn apply<T: Real>(self, x: T) -> T {
        match self {
            Activation::Relu => x.max(T::zero()),
            Activation::Softplus => softplus(x),
            Activation::Sigmoid => sigmoid(x),
        }
    }

    /// Derivative expressed from the input `x` and output `y`.
    #[inline]
    pub fn derivative<T: Real>(self, x: T, y: T) -> T {
        match self {
            Activation::Relu => {
                if x > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Activation::Softplus => sigmoid(x),
            Activation::Sigmoid => y * (T::one() - y),
        }
    }
}

pub fn activation_forward<T: Real>(x: &Tensor4<T>, kind: Activation) -> Tensor4<T> {
    x.map(|v| kind.apply(v))
}

pub fn activation_backward<T: Real>(
    x: &Tensor4<T>,
    y: &Tensor4<T>,
    kind: Activation,
    dy: &Tensor4<T>,
) -> Tensor4<T> {
    let mut dx = Tensor4::zeros(x.shape());
    for (((d, &xi), &yi), &g) in dx
        .data_mut()
        .iter_mut()
        .zip(x.data())
        .zip(y.data())
        .zip(dy.data())
    {
        *d = g * kind.derivative(xi, yi);
    }
    dx
}
