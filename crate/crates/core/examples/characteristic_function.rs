//! Joint characteristic function of two log futures returns, from the
//! closed form and from the Riccati ODEs, plus the special functions behind
//! the closed form.

use commodity_sv::charfn::{Backend, CFContext};
use commodity_sv::model::ModelParams;
use commodity_sv::specfun::{gamma_complex, kummer_m, tricomi_u};
use num_complex::Complex64;

fn main() -> commodity_sv::error::Result<()> {
    let c = Complex64::new;
    println!("Gamma(0.5)       = {:.15}", gamma_complex(c(0.5, 0.0))?.re);
    println!("Gamma(1 + 2i)    = {:.12}", gamma_complex(c(1.0, 2.0))?);
    let m = kummer_m(c(0.5, 0.2), c(1.5, 0.0), c(-3.0, 1.0))?;
    println!("M(a, b, z)       = {:.12}  ({:?}, {} terms)", m.value, m.method, m.terms_used);
    let u = tricomi_u(c(0.5, 0.2), c(1.5, 0.0), c(3.0, 1.0))?;
    println!("U(a, b, z)       = {:.12}  ({:?})", u.value, u.method);

    let model = ModelParams::reference_sv2f();
    let closed = CFContext::new(model.clone(), 0.25, 0.25, 0.75)?;
    let ode = CFContext::new(model, 0.25, 0.25, 0.75)?.with_backend(Backend::Ode);
    println!("\n{:>16} {:>16} {:>30} {:>10}", "u1", "u2", "phi (closed form)", "rel diff");
    for (u1, u2) in [
        (c(0.0, 0.0), c(0.0, 0.0)),
        (c(0.0, -1.0), c(0.0, 0.0)),
        (c(1.0, 0.0), c(-1.0, 0.0)),
        (c(3.0, -0.5), c(2.0, 0.25)),
        (c(-10.0, 0.0), c(12.0, 0.0)),
    ] {
        let a = closed.phi(u1, u2)?;
        let b = ode.phi(u1, u2)?;
        let rel = (a - b).norm() / a.norm().max(1e-300);
        println!("{:>16} {:>16} {:>30.12} {:>10.1e}", format!("{u1}"), format!("{u2}"), a, rel);
    }
    Ok(())
}
