//! Classification and reconstruction objectives and their weighted total.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Var;

/// Scaling factors of the two reconstruction terms and the quantization term.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Betas {
    pub rec1: f64,
    pub rec2: f64,
    pub quant: f64,
}

impl Default for Betas {
    fn default() -> Self {
        Betas {
            rec1: 0.9,
            rec2: 0.9,
            quant: 0.25,
        }
    }
}

impl Betas {
    pub fn validate(&self) -> Result<()> {
        for (name, b) in [("rec1", self.rec1), ("rec2", self.rec2), ("quant", self.quant)] {
            if !(b >= 0.0 && b.is_finite()) {
                return Err(Error::Argument(format!(
                    "beta for {name} must be finite and >= 0, got {b}"
                )));
            }
        }
        Ok(())
    }
}

/// Scalar values of every loss component from one forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBundle {
    pub ce: f64,
    pub rec1: f64,
    pub rec2: f64,
    pub quant: f64,
    pub total: f64,
    pub betas: Betas,
}

impl LossBundle {
    pub fn new(ce: f64, rec1: f64, rec2: f64, quant: f64, betas: Betas) -> Result<Self> {
        betas.validate()?;
        Ok(LossBundle {
            ce,
            rec1,
            rec2,
            quant,
            total: ce + rec1 * betas.rec1 + rec2 * betas.rec2 + quant * betas.quant,
            betas,
        })
    }

    pub fn is_finite(&self) -> bool {
        [self.ce, self.rec1, self.rec2, self.quant, self.total]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// Mean negative log-likelihood of `labels` under row-stochastic `probs`
/// (`[N, classes]`). Probabilities are clamped at 1e-12 before the log.
pub fn cross_entropy<'t>(probs: Var<'t>, labels: &[usize]) -> Result<Var<'t>> {
    let shape = probs.shape();
    let [n, classes] = shape[..] else {
        return Err(Error::dim("cross_entropy", &shape, &[labels.len()]));
    };
    if n != labels.len() {
        return Err(Error::dim("cross_entropy", &shape, &[labels.len()]));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::Argument(format!("label {bad} outside {classes} classes")));
    }
    let picks: Vec<usize> = labels.iter().enumerate().map(|(i, &l)| i * classes + l).collect();
    let chosen = probs.reshape(&[n * classes, 1])?.gather_rows(&picks)?;
    Ok(chosen.ln_clamped().mean_all()?.scale(-1.0))
}

/// Squared error summed over every axis but the first, averaged over the first.
pub fn reconstruction<'t>(x: Var<'t>, x_hat: Var<'t>) -> Result<Var<'t>> {
    let n = x.shape().first().copied().unwrap_or(1).max(1);
    let diff = x.sub(x_hat)?;
    Ok(diff.mul(diff)?.sum_all()?.scale(1.0 / n as f64))
}

/// Weighted total `ce + β₁·rec1 + β₂·rec2 + β₃·quant`, with a bundle whose
/// `total` is bit-identical to the returned variable's value.
pub fn total_loss<'t>(
    ce: Var<'t>,
    rec1: Var<'t>,
    rec2: Var<'t>,
    quant: Var<'t>,
    betas: Betas,
) -> Result<(Var<'t>, LossBundle)> {
    betas.validate()?;
    let total = ce
        .add(rec1.scale(betas.rec1))?
        .add(rec2.scale(betas.rec2))?
        .add(quant.scale(betas.quant))?;
    let bundle = LossBundle::new(ce.item(), rec1.item(), rec2.item(), quant.item(), betas)?;
    debug_assert_eq!(bundle.total.to_bits(), total.item().to_bits());
    Ok((total, bundle))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{grad_check, Tape, Tensor};

    fn probs<'t>(tape: &'t Tape, rows: &[Vec<f64>]) -> Var<'t> {
        tape.constant(Tensor::from_rows(rows).unwrap())
    }

    #[test]
    fn cross_entropy_closed_forms() {
        let tape = Tape::new();
        let one_hot = probs(&tape, &[vec![0.0, 1.0, 0.0]]);
        assert_eq!(cross_entropy(one_hot, &[1]).unwrap().item(), 0.0);

        let uniform = probs(&tape, &[vec![0.1; 10]]);
        let ce = cross_entropy(uniform, &[3]).unwrap().item();
        assert!((ce - 10f64.ln()).abs() < 1e-12);

        let two = probs(&tape, &[vec![0.5, 0.5], vec![0.75, 0.25]]);
        let ce = cross_entropy(two, &[0, 1]).unwrap().item();
        assert!((ce - (2f64.ln() + 4f64.ln()) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_rejects_bad_labels_and_clamps() {
        let tape = Tape::new();
        let p = probs(&tape, &[vec![1.0, 0.0]]);
        assert!(matches!(cross_entropy(p, &[2]), Err(Error::Argument(_))));
        let ce = cross_entropy(p, &[1]).unwrap().item();
        assert!((ce - 1e12f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn reconstruction_examples() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![1, 1], vec![3.0]).unwrap());
        let y = tape.constant(Tensor::new(vec![1, 1], vec![1.0]).unwrap());
        assert_eq!(reconstruction(x, x).unwrap().item(), 0.0);
        assert_eq!(reconstruction(x, y).unwrap().item(), 4.0);

        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::from_rows(&[vec![1.0, 1.0, 1.0], vec![2.0, 0.0, 0.0]]).unwrap());
        assert_eq!(reconstruction(a, b).unwrap().item(), 3.5);
        let c = tape.constant(Tensor::zeros(&[3, 2]));
        assert!(matches!(reconstruction(a, c), Err(Error::Dimension { .. })));
    }

    #[test]
    fn weighted_total() {
        let b = LossBundle::new(1.0, 2.0, 2.0, 4.0, Betas::default()).unwrap();
        assert!((b.total - 5.6).abs() < 1e-12);
        let masked = Betas {
            rec1: 0.0,
            rec2: 0.0,
            quant: 0.0,
        };
        assert_eq!(LossBundle::new(1.25, 2.0, 2.0, 4.0, masked).unwrap().total, 1.25);
        let negative = Betas { rec1: -0.1, ..masked };
        assert!(LossBundle::new(1.0, 0.0, 0.0, 0.0, negative).is_err());
    }

    #[test]
    fn total_gradient_is_weighted_sum_of_component_gradients() {
        let x = Tensor::from_rows(&[vec![0.3, -0.7, 1.1], vec![0.2, 0.9, -0.4]]).unwrap();
        let target = Tensor::from_rows(&[vec![1.0, 0.0, 0.5], vec![-1.0, 0.25, 0.0]]).unwrap();
        let betas = Betas {
            rec1: 0.9,
            rec2: 0.4,
            quant: 0.25,
        };
        let components = |tape: &Tape, v: Var<'_>| -> Vec<Tensor> {
            let t = tape.constant(target.clone());
            let p = v.softmax_rows();
            let terms = [
                cross_entropy(p, &[2, 0]).unwrap(),
                reconstruction(v, t).unwrap(),
                reconstruction(v.scale(2.0), t).unwrap(),
                v.mul(v).unwrap().mean_all().unwrap(),
            ];
            terms.iter().map(|&l| tape.backward(l).unwrap().get(v)).collect()
        };
        let tape = Tape::new();
        let v = tape.param(&x);
        let parts = components(&tape, v);
        let t = tape.constant(target.clone());
        let (total, _) = total_loss(
            cross_entropy(v.softmax_rows(), &[2, 0]).unwrap(),
            reconstruction(v, t).unwrap(),
            reconstruction(v.scale(2.0), t).unwrap(),
            v.mul(v).unwrap().mean_all().unwrap(),
            betas,
        )
        .unwrap();
        let g = tape.backward(total).unwrap().get(v);
        let weights = [1.0, betas.rec1, betas.rec2, betas.quant];
        for i in 0..x.len() {
            let expect: f64 = parts.iter().zip(weights).map(|(p, w)| w * p.data()[i]).sum();
            assert!((g.data()[i] - expect).abs() < 1e-12);
        }

        let report = grad_check(
            |tape, v| {
                let t = tape.constant(target.clone());
                Ok(total_loss(
                    cross_entropy(v.softmax_rows(), &[2, 0])?,
                    reconstruction(v, t)?,
                    reconstruction(v.scale(2.0), t)?,
                    v.mul(v)?.mean_all()?,
                    betas,
                )?
                .0)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(report.max_relative_error < 1e-6, "{report:?}");
    }
}
