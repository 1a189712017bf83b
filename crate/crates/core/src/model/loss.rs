use log::warn;

use super::{FusionModelParams, HeadOutputs, Modality, Path};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Probabilities below this are clamped inside the log of the CE term.
pub const LOG_CLAMP: f64 = 1e-12;

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossParts {
    pub ce: f64,
    pub mse: f64,
    pub l2: f64,
    /// Number of target probabilities that hit [`LOG_CLAMP`].
    pub clamped: usize,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Loss {
    pub total: f64,
    pub parts: LossParts,
}

fn check_target(out: &HeadOutputs, target: &Tensor) -> Result<(usize, usize)> {
    let (b, c) = out.o1.dims2()?;
    if target.shape() != [b, c] || out.o2.shape() != [b, c] || out.o_fusion.shape() != [b, c] {
        return Err(Error::dim(format!(
            "target {:?} does not match head outputs {:?}",
            target.shape(),
            out.o1.shape()
        )));
    }
    for row in target.data().chunks(c) {
        let ones = row.iter().filter(|&&v| v == 1.0).count();
        if ones != 1 || row.iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::arg("target rows must be one-hot"));
        }
    }
    Ok((b, c))
}

/// Composite objective: summed cross-entropy of the own head against the
/// target, the squared disagreement of the partner and fused heads with the
/// own head averaged over samples, and an L2 penalty on the weights the
/// client's pass touches. The single path drops the disagreement term.
pub fn compute_loss(
    out: &HeadOutputs,
    target: &Tensor,
    params: &FusionModelParams,
    own: Modality,
    path: Path,
) -> Result<Loss> {
    let (b, _) = check_target(out, target)?;
    let mut ce = 0.0;
    let mut clamped = 0;
    let o1 = out.o1.to_f64();
    for (&t, &p) in target.data().iter().zip(&o1) {
        if t > 0.0 {
            if p < LOG_CLAMP {
                clamped += 1;
            }
            ce -= t as f64 * p.max(LOG_CLAMP).ln();
        }
    }
    if clamped > 0 {
        warn!("cross-entropy clamped {clamped} zero probabilities at {LOG_CLAMP:e}");
    }
    let mse = match path {
        Path::Fusion => {
            let sq = |a: &Tensor| -> f64 {
                a.to_f64()
                    .iter()
                    .zip(&o1)
                    .map(|(x, y)| (x - y).powi(2))
                    .sum()
            };
            (sq(&out.o2) + sq(&out.o_fusion)) / b as f64
        }
        Path::Single => 0.0,
    };
    let l2 = params.l2_coeff()
        * params
            .decayed_layers(own, path == Path::Fusion)
            .iter()
            .map(|l| l.weights.sum_squares())
            .sum::<f64>();
    Ok(Loss {
        total: ce + mse + l2,
        parts: LossParts {
            ce,
            mse,
            l2,
            clamped,
        },
    })
}

/// Gradients of the CE and MSE terms with respect to the head outputs.
#[derive(Clone, Debug)]
pub struct HeadGrads {
    pub o1: Tensor,
    pub o2: Option<Tensor>,
    pub o_fusion: Option<Tensor>,
}

pub fn loss_gradients(out: &HeadOutputs, target: &Tensor, path: Path) -> Result<HeadGrads> {
    let (b, c) = check_target(out, target)?;
    let o1 = out.o1.data();
    let mut g1: Vec<f64> = target
        .data()
        .iter()
        .zip(o1)
        .map(|(&t, &p)| {
            if t > 0.0 && (p as f64) >= LOG_CLAMP {
                -(t as f64) / p as f64
            } else {
                0.0
            }
        })
        .collect();
    match path {
        Path::Single => Ok(HeadGrads {
            o1: Tensor::from_f64(vec![b, c], &g1)?,
            o2: None,
            o_fusion: None,
        }),
        Path::Fusion => {
            let scale = 2.0 / b as f64;
            let diff = |a: &Tensor| -> Vec<f64> {
                a.data()
                    .iter()
                    .zip(o1)
                    .map(|(&x, &y)| scale * (x as f64 - y as f64))
                    .collect()
            };
            let g2 = diff(&out.o2);
            let gf = diff(&out.o_fusion);
            for i in 0..g1.len() {
                g1[i] -= g2[i] + gf[i];
            }
            Ok(HeadGrads {
                o1: Tensor::from_f64(vec![b, c], &g1)?,
                o2: Some(Tensor::from_f64(vec![b, c], &g2)?),
                o_fusion: Some(Tensor::from_f64(vec![b, c], &gf)?),
            })
        }
    }
}

/// Hard labels plus the confidence map: `binary[i]` is 1 when the winning
/// probability reaches `tau`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Prediction {
    pub labels: Vec<usize>,
    pub binary: Vec<u8>,
}

/// Arg-max prediction (lowest index on ties) with threshold map.
pub fn predict(probs: &Tensor, tau: f64) -> Result<Prediction> {
    let (b, c) = probs.dims2()?;
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::arg(format!("tau must lie in (0, 1), got {tau}")));
    }
    let mut labels = Vec::with_capacity(b);
    let mut binary = Vec::with_capacity(b);
    for row in probs.data().chunks(c) {
        let (best, p) =
            row.iter().enumerate().fold(
                (0, row[0]),
                |(bi, bp), (i, &v)| if v > bp { (i, v) } else { (bi, bp) },
            );
        labels.push(best);
        binary.push(u8::from(p as f64 >= tau));
    }
    Ok(Prediction { labels, binary })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn outputs(o1: &[f32], o2: &[f32], of: &[f32], c: usize) -> HeadOutputs {
        let b = o1.len() / c;
        HeadOutputs {
            o1: Tensor::new(vec![b, c], o1.to_vec()).unwrap(),
            o2: Tensor::new(vec![b, c], o2.to_vec()).unwrap(),
            o_fusion: Tensor::new(vec![b, c], of.to_vec()).unwrap(),
        }
    }

    fn unpenalised(classes: usize) -> FusionModelParams {
        let mut cfg = ModelConfig::new([1, 1], classes);
        cfg.l2_coeff = 0.0;
        FusionModelParams::init(cfg, 0).unwrap()
    }

    #[test]
    fn perfect_prediction_has_zero_loss() {
        let p = unpenalised(3);
        let one_hot = [0.0, 1.0, 0.0];
        let out = outputs(&one_hot, &one_hot, &one_hot, 3);
        let t = Tensor::new(vec![1, 3], one_hot.to_vec()).unwrap();
        let loss = compute_loss(&out, &t, &p, Modality::M1, Path::Fusion).unwrap();
        assert_eq!(loss.total, 0.0);
    }

    #[test]
    fn agreeing_heads_have_zero_mse() {
        let p = unpenalised(3);
        let o = [0.2, 0.3, 0.5];
        let out = outputs(&o, &o, &o, 3);
        let t = Tensor::new(vec![1, 3], vec![0.0, 0.0, 1.0]).unwrap();
        let loss = compute_loss(&out, &t, &p, Modality::M1, Path::Fusion).unwrap();
        assert_eq!(loss.parts.mse, 0.0);
        assert!((loss.parts.ce + 0.5f64.ln()).abs() < 1e-7);
    }

    #[test]
    fn hand_evaluated_terms() {
        let p = unpenalised(2);
        let out = outputs(&[0.5, 0.5], &[1.0, 0.0], &[0.0, 1.0], 2);
        let t = Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap();
        let loss = compute_loss(&out, &t, &p, Modality::M1, Path::Fusion).unwrap();
        assert!((loss.parts.ce - std::f64::consts::LN_2).abs() < 1e-7);
        assert!((loss.parts.mse - 1.0).abs() < 1e-12);
        assert_eq!(loss.parts.l2, 0.0);
        let single = compute_loss(&out, &t, &p, Modality::M1, Path::Single).unwrap();
        assert_eq!(single.parts.mse, 0.0);
    }

    #[test]
    fn zero_probability_is_clamped_and_counted() {
        let p = unpenalised(2);
        let out = outputs(&[1.0, 0.0], &[1.0, 0.0], &[1.0, 0.0], 2);
        let t = Tensor::new(vec![1, 2], vec![0.0, 1.0]).unwrap();
        let loss = compute_loss(&out, &t, &p, Modality::M2, Path::Fusion).unwrap();
        assert_eq!(loss.parts.clamped, 1);
        assert!((loss.parts.ce - (-(LOG_CLAMP.ln()))).abs() < 1e-9);
        assert!(loss.total.is_finite());
    }

    #[test]
    fn l2_counts_touched_weights() {
        let mut cfg = ModelConfig::new([2, 1], 3);
        cfg.l2_coeff = 0.5;
        let p = FusionModelParams::init(cfg, 4).unwrap();
        let o = [0.2, 0.3, 0.5];
        let out = outputs(&o, &o, &o, 3);
        let t = Tensor::new(vec![1, 3], vec![0.0, 0.0, 1.0]).unwrap();
        let loss = compute_loss(&out, &t, &p, Modality::M1, Path::Fusion).unwrap();
        let manual: f64 = [
            &p.branches[0].conv,
            &p.upsample_f1.conv_a,
            &p.upsample_f1.conv_b,
            &p.upsample_f2.conv_a,
            &p.upsample_f2.conv_b,
            &p.head_self,
            &p.head_other,
            &p.head_fusion,
        ]
        .iter()
        .map(|l| l.weights.sum_squares())
        .sum();
        assert!((loss.parts.l2 - 0.5 * manual).abs() < 1e-9);
    }

    #[test]
    fn non_one_hot_target_is_rejected() {
        let p = unpenalised(2);
        let out = outputs(&[0.5, 0.5], &[0.5, 0.5], &[0.5, 0.5], 2);
        let t = Tensor::new(vec![1, 2], vec![0.5, 0.5]).unwrap();
        assert!(compute_loss(&out, &t, &p, Modality::M1, Path::Fusion).is_err());
    }

    #[test]
    fn prediction_threshold_and_ties() {
        let p = predict(&Tensor::new(vec![1, 3], vec![0.7, 0.2, 0.1]).unwrap(), 0.5).unwrap();
        assert_eq!((p.labels[0], p.binary[0]), (0, 1));
        let p = predict(&Tensor::new(vec![1, 3], vec![0.4, 0.3, 0.3]).unwrap(), 0.5).unwrap();
        assert_eq!((p.labels[0], p.binary[0]), (0, 0));
        let p = predict(&Tensor::new(vec![1, 2], vec![0.5, 0.5]).unwrap(), 0.4).unwrap();
        assert_eq!((p.labels[0], p.binary[0]), (0, 1));
    }
}
