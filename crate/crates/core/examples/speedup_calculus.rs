//! Evaluates speedup curves and the width a job would request at a few prices.
//!
//!     cargo run --example speedup_calculus

use malleable::speedup::SpeedupFunction;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let curves = [
        ("k^0.3", SpeedupFunction::power(0.3)?),
        ("k^0.5", SpeedupFunction::power(0.5)?),
        ("amdahl 20%", SpeedupFunction::amdahl(0.2)?),
        ("table", SpeedupFunction::table(&[[1.0, 1.0], [4.0, 2.5], [16.0, 4.0]])?),
    ];

    println!("{:<12} {:>8} {:>8} {:>8} {:>10}", "curve", "s(4)", "s(16)", "s'(4)", "f(4)");
    for (name, s) in &curves {
        println!(
            "{:<12} {:>8.4} {:>8.4} {:>8.4} {:>10.5}",
            name,
            s.eval(4.0)?,
            s.eval(16.0)?,
            s.deriv(4.0)?,
            s.whittle_f(4.0)?
        );
    }

    println!("\nwidth requested by a job with holding cost 1 at price ell:");
    println!("{:<12} {:>10} {:>10} {:>10}", "curve", "ell=0.5", "ell=0.05", "ell=0.005");
    for (name, s) in &curves {
        let g = |ell: f64| s.g(1.0, ell).map(|k| format!("{k:.3}")).unwrap_or_else(|e| format!("({e})"));
        println!("{:<12} {:>10} {:>10} {:>10}", name, g(0.5), g(0.05), g(0.005));
    }

    println!("\ncore-seconds to run 1 unit of work on k cores (amdahl 20%):");
    for k in [1.0, 2.0, 8.0, 32.0] {
        println!("  k = {k:>4}: {:.4}", curves[2].1.effective_work(1.0, k)?);
    }
    Ok(())
}
