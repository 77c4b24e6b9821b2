use super::{softmax_cross_entropy, Tensor4, UNet};
use crate::error::{Error, Result};
use crate::rng::DetRng;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckOptions {
    pub epsilon: f64,
    /// Parameters to check; `None` checks all of them.
    pub samples: Option<usize>,
    /// Drives the parameter subsample.
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self { epsilon: 1e-3, samples: None, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Flat index (see `ModelParams::param_mut`) of the worst parameter.
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
    /// Parameters skipped because a perturbation crossed a ReLU or pooling
    /// boundary, where the loss is not differentiable.
    pub skipped_kinks: usize,
}

fn rel_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-8)
}

/// Central finite differences against the analytic gradient of the mean
/// cross-entropy loss. Returns the max of `|a - n| / max(|a|, |n|, 1e-8)`.
///
/// A sampled parameter whose `+eps` or `-eps` evaluation changes any ReLU
/// sign or pooling choice is replaced by another one, so every compared
/// difference is taken on a single smooth piece of the loss.
pub fn grad_check(
    net: &mut UNet<f64>,
    input: &Tensor4<f64>,
    labels: &[u8],
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    if !(opts.epsilon > 0.0) {
        return Err(Error::InvalidArgument(format!("epsilon must be positive, got {}", opts.epsilon)));
    }
    let logits = net.forward(input)?;
    let base_pattern = net.activation_pattern().expect("forward sets cache");
    let (_, dlogits) = softmax_cross_entropy(&logits, labels)?;
    let grads = net.backward(&dlogits)?;

    let total = net.params.num_params();
    let mut order: Vec<usize> = (0..total).collect();
    let want = match opts.samples {
        Some(k) if k < total => {
            DetRng::new(opts.seed).shuffle(&mut order);
            k
        }
        _ => total,
    };

    let eps = opts.epsilon;
    let eval = |net: &mut UNet<f64>| -> Result<(f64, bool)> {
        let z = net.forward(input)?;
        let same = net.activation_pattern().expect("forward sets cache") == base_pattern;
        Ok((softmax_cross_entropy(&z, labels)?.0, same))
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
        skipped_kinks: 0,
    };
    for &i in &order {
        if report.checked == want {
            break;
        }
        let orig = *net.params.param_mut(i);
        *net.params.param_mut(i) = orig + eps;
        let (lp, same_p) = eval(net)?;
        *net.params.param_mut(i) = orig - eps;
        let (lm, same_m) = eval(net)?;
        *net.params.param_mut(i) = orig;
        if !(same_p && same_m) {
            report.skipped_kinks += 1;
            continue;
        }
        let numeric = (lp - lm) / (2.0 * eps);
        let analytic = grads.get(i);
        let e = rel_error(analytic, numeric);
        if e > report.max_rel_error || report.checked == 0 {
            report.max_rel_error = e;
            report.worst_index = i;
            report.analytic = analytic;
            report.numeric = numeric;
        }
        report.checked += 1;
    }
    net.clear_cache();
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nnet::{conv2d_backward, conv2d_forward, UNetConfig};

    #[test]
    fn relative_error_floor() {
        assert_eq!(rel_error(0.0, 0.0), 0.0);
        assert!((rel_error(1e-9, 2e-9) - 0.1).abs() < 1e-12);
        assert!((rel_error(2.0, 1.0) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn linear_conv_is_exact() {
        // f(w) = <conv(x; w), y> is linear in w, so central differences are exact
        let mut rng = DetRng::new(1);
        let x = Tensor4::from_fn([1, 2, 5, 5], |_, _, _, _| rng.uniform_in(-1.0, 1.0));
        let y = Tensor4::from_fn([1, 3, 5, 5], |_, _, _, _| rng.uniform_in(-1.0, 1.0));
        let w: Vec<f64> = (0..54).map(|_| rng.uniform_in(-1.0, 1.0)).collect();
        let b = vec![0.1, -0.2, 0.3];
        let g = conv2d_backward(&x, &w, 3, 3, &y, false).unwrap();
        let f = |w: &[f64]| conv2d_forward(&x, w, &b, 3, 3).unwrap().dot(&y);
        let eps = 1e-3;
        for i in 0..w.len() {
            let mut wp = w.clone();
            wp[i] += eps;
            let mut wm = w.clone();
            wm[i] -= eps;
            let num = (f(&wp) - f(&wm)) / (2.0 * eps);
            assert!(rel_error(g.dw[i], num) < 1e-7, "{i}");
        }
    }

    #[test]
    fn tiny_unet_full_check() {
        let cfg = UNetConfig::new(1, 2, 8);
        let mut net = UNet::<f64>::new(cfg, 11).unwrap();
        let mut rng = DetRng::new(12);
        let x = Tensor4::from_fn([2, 1, 8, 8], |_, _, _, _| rng.uniform());
        let labels: Vec<u8> = (0..128).map(|_| rng.bernoulli(0.3) as u8).collect();
        let r = grad_check(&mut net, &x, &labels, &GradCheckOptions::default()).unwrap();
        assert!(r.checked + r.skipped_kinks == net.params.num_params());
        assert!(r.checked > net.params.num_params() / 2);
        assert!(r.max_rel_error < 1e-4, "{r:?}");
    }
}
