//! Scratch probe: does a stable single-interface state exist below d = 0.019?

use xdcont::config::load_config;
use xdcont::continuation::{n_unstable_of, Continuer};
use xdcont::models::{time_relax, ModelKind, State};

fn shape(u: &[f64]) -> String {
    u.iter().map(|&v| if v > 1.625 { '+' } else { '-' }).collect()
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let cfg = load_config(std::path::Path::new("configs/table1_1d.json"))?;
    let (mesh, ws) = cfg.build_mesh()?;
    let n = mesh.nodes.len();
    let cont = Continuer::new(&mesh, &ws, cfg.params.clone(), cfg.model, cfg.continuation.clone())?;

    for d in [0.0185, 0.017, 0.015, 0.012, 0.008] {
        let p = cfg.params.with_active(d);
        // single-interface initial guess: u high on the right, v opposite
        let mut fields = vec![0.0; 2 * n];
        for i in 0..n {
            let x = mesh.nodes[i][0];
            let t = ((x - 0.5) / 0.08).tanh();
            fields[i] = 1.625 + 0.55 * t;
            fields[n + i] = 0.125 - 0.115 * t;
        }
        let s0 = State::new(fields, d, ModelKind::Cross);
        let (sf, steady) = time_relax(&mesh, &ws, &p, &s0, 0.02, 600.0, 1e-10)?;
        let relax_shape = shape(&sf.fields[..n]);
        // polish: is the relaxed profile an exact steady state?
        match cont.fixed_param_newton(&sf.fields, d) {
            Ok((x, iters)) => {
                let st = State::new(x.clone(), d, ModelKind::Cross);
                let (nu, marg) = n_unstable_of(&ws, &cfg.params, &st, 10)?;
                println!(
                    "d={d}: relax steady={steady} {relax_shape} | newton {iters} its, n_unstable={nu} marginal={marg} {}",
                    shape(&x[..n])
                );
            }
            Err(e) => println!("d={d}: relax steady={steady} {relax_shape} | newton failed: {e}"),
        }
    }
    Ok(())
}
