//! Spike-class map of the Hodgkin-Huxley benchmark over its prior box for a
//! range of step-current protocols.
//!
//! Usage: `cargo run --release --example hh_scan -- [points] [amp,dur ...]`

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use synlik::grid::Grid;
use synlik::simulators::{BoxPrior, HhConstants, HhProtocol, HhSim, Integrator, HH_CLASSES};

fn main() {
    let mut args = std::env::args().skip(1);
    let points: usize = args.next().and_then(|a| a.parse().ok()).unwrap_or(50);
    let protocols: Vec<(f64, f64)> = {
        let given: Vec<(f64, f64)> = args
            .filter_map(|a| {
                let (amp, dur) = a.split_once(',')?;
                Some((amp.parse().ok()?, dur.parse().ok()?))
            })
            .collect();
        if given.is_empty() {
            vec![(HhProtocol::default().amplitude, HhProtocol::default().duration)]
        } else {
            given
        }
    };
    let prior = BoxPrior::new(vec![0.5, 0.5], vec![60.0, 10.0]).expect("prior");
    let grid = Grid::over_box(&prior, points).expect("grid");
    for (amplitude, duration) in protocols {
        let protocol = HhProtocol {
            amplitude,
            duration,
            t_total: HhProtocol::default().onset + duration + 10.0,
            dt: std::env::var("HH_DT").ok().and_then(|v| v.parse().ok()).unwrap_or(HhProtocol::default().dt),
            integrator: match std::env::var("HH_INTEGRATOR").as_deref() {
                Ok("exponential-euler") => Integrator::ExponentialEuler,
                _ => Integrator::Rk4,
            },
            ..HhProtocol::default()
        };
        let sim = HhSim::new(HhConstants::bundled(), protocol);
        let mut counts = [0usize; HH_CLASSES];
        let mut failures = 0;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut map = Vec::new();
        for theta in grid.points() {
            match sim.simulate(&theta, &mut rng) {
                Ok(x) => {
                    counts[x[0] as usize] += 1;
                    map.push(x[0] as usize);
                }
                Err(_) => {
                    failures += 1;
                    map.push(9);
                }
            }
        }
        // Δt-refinement: fraction of cells whose class changes when the step halves
        let fine = HhSim::new(
            HhConstants::bundled(),
            HhProtocol {
                dt: sim.protocol.dt / 2.0,
                ..sim.protocol.clone()
            },
        );
        let changed = grid
            .points()
            .iter()
            .zip(&map)
            .filter(|(theta, &c)| fine.simulate(theta, &mut rng).map_or(9, |x| x[0] as usize) != c)
            .count();
        println!(
            "amplitude {amplitude} duration {duration}: classes {counts:?} failures {failures} refinement changes {:.2}%",
            100.0 * changed as f64 / map.len() as f64
        );
        if points <= 25 {
            // rows: g_K from high to low; columns: g_Na from low to high
            for j in (0..points).rev() {
                let row: String = (0..points).map(|i| char::from(b'0' + map[i * points + j] as u8)).collect();
                println!("  {row}");
            }
        }
    }
}
