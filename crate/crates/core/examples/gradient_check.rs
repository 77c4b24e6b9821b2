//! Compares backpropagated gradients of a tiny U-Net with central finite
//! differences in double precision.

use virotem::nnet::{grad_check, GradCheckOptions, Tensor4, UNet, UNetConfig};
use virotem::rng::DetRng;

fn main() -> virotem::Result<()> {
    let mut net = UNet::<f64>::new(UNetConfig::new(2, 4, 16), 1)?;
    let mut rng = DetRng::new(2);
    let x = Tensor4::from_fn([2, 1, 16, 16], |_, _, _, _| rng.uniform());
    let labels: Vec<u8> = (0..2 * 256).map(|_| rng.bernoulli(0.3) as u8).collect();

    let opts = GradCheckOptions { samples: Some(1000), ..GradCheckOptions::default() };
    let r = grad_check(&mut net, &x, &labels, &opts)?;
    println!(
        "{} parameters checked, {} skipped at kinks, max relative error {:.2e} (param {}: analytic {:.6e}, numeric {:.6e})",
        r.checked, r.skipped_kinks, r.max_rel_error, r.worst_index, r.analytic, r.numeric
    );
    Ok(())
}
