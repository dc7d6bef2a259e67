use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use super::{DiffusionModel, InitialLaw, PathEnsemble, TimeGrid};
use crate::{linalg, Error, Result};

/// Random stream of one path: ChaCha8 keyed by the master seed, with the path
/// index as the stream id. Streams never overlap, so results do not depend
/// on how paths are scheduled across threads.
pub fn path_rng(seed: u64, path: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(path as u64);
    rng
}

struct Scratch {
    drift: Vec<f64>,
    sigma: Vec<f64>,
    noise: Vec<f64>,
}

/// Euler–Maruyama: `X_{m+1} = X_m + b(t_m, X_m)Δt + σ(t_m, X_m)√Δt ξ_m`.
pub fn simulate(model: &DiffusionModel, grid: &TimeGrid, n_paths: usize, seed: u64) -> Result<PathEnsemble> {
    if n_paths == 0 {
        return Err(Error::input("simulation needs at least one path"));
    }
    let d = model.dim();
    let width = n_paths * d;
    let mut values = vec![0.0; grid.len() * width];
    let mut rngs: Vec<ChaCha8Rng> = (0..n_paths).map(|n| path_rng(seed, n)).collect();

    let chol = match model.initial() {
        InitialLaw::Point(_) => None,
        InitialLaw::Gaussian { cov, .. } => Some(linalg::cholesky(d, cov)?),
    };
    values[..width]
        .par_chunks_mut(d)
        .zip(rngs.par_iter_mut())
        .for_each(|(x, rng)| match model.initial() {
            InitialLaw::Point(p) => x.copy_from_slice(p),
            InitialLaw::Gaussian { mean, .. } => {
                let l = chol.as_ref().unwrap();
                let z: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
                for i in 0..d {
                    x[i] = mean[i] + (0..=i).map(|j| l[i * d + j] * z[j]).sum::<f64>();
                }
            }
        });

    let dt = grid.dt();
    let sqrt_dt = dt.sqrt();
    let deterministic = model.is_deterministic();
    for m in 0..grid.steps() {
        let t = grid.time(m);
        let (head, tail) = values.split_at_mut((m + 1) * width);
        let prev = &head[m * width..];
        let next = &mut tail[..width];
        next.par_chunks_mut(d)
            .zip(prev.par_chunks(d))
            .zip(rngs.par_iter_mut())
            .for_each_init(
                || Scratch {
                    drift: vec![0.0; d],
                    sigma: vec![0.0; d * d],
                    noise: vec![0.0; d],
                },
                |s, ((x_next, x), rng)| {
                    model.drift_into(t, x, &mut s.drift);
                    for k in 0..d {
                        x_next[k] = x[k] + s.drift[k] * dt;
                    }
                    if !deterministic {
                        model.dispersion_into(t, x, &mut s.sigma);
                        for z in s.noise.iter_mut() {
                            *z = StandardNormal.sample(rng);
                        }
                        for i in 0..d {
                            let row = &s.sigma[i * d..(i + 1) * d];
                            let kick: f64 = row.iter().zip(&s.noise).map(|(a, z)| a * z).sum();
                            x_next[i] += kick * sqrt_dt;
                        }
                    }
                },
            );
        if next.par_iter().any(|v| !v.is_finite()) {
            let path = next.chunks(d).position(|x| x.iter().any(|v| !v.is_finite())).unwrap();
            return Err(Error::Simulation {
                t,
                path,
                state: prev[path * d..(path + 1) * d].to_vec(),
            });
        }
    }
    PathEnsemble::from_values(*grid, n_paths, d, values, seed, model.label().to_string())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stats::mean_stderr;

    #[test]
    fn no_dynamics_stays_put() {
        let model = DiffusionModel::deterministic(1, |_, _, b| b[0] = 0.0, vec![1.0]).unwrap();
        let grid = TimeGrid::new(0.0, 1.0, 50).unwrap();
        let e = simulate(&model, &grid, 7, 3).unwrap();
        assert!(e.values().iter().all(|v| *v == 1.0));
    }

    #[test]
    fn decay_tracks_exponential() {
        let model = DiffusionModel::deterministic(1, |_, x, b| b[0] = -x[0], vec![1.0]).unwrap();
        let grid = TimeGrid::new(0.5, 1.5, 1000).unwrap();
        let e = simulate(&model, &grid, 1, 0).unwrap();
        let err = (0..grid.len())
            .map(|m| (e.state(m, 0)[0] - (-(grid.time(m) - 0.5)).exp()).abs())
            .fold(0.0, f64::max);
        assert!(err <= 5.0 * grid.dt(), "max error {err}");
    }

    #[test]
    fn brownian_moments() {
        let model = DiffusionModel::brownian(1, 1.0, InitialLaw::Point(vec![0.0])).unwrap();
        let grid = TimeGrid::new(1.0, 2.0, 1000).unwrap();
        let n = 20_000;
        let e = simulate(&model, &grid, n, 11).unwrap();
        let end: Vec<f64> = e.slice(1000).to_vec();
        let (mean, _) = mean_stderr(&end);
        assert!(mean.abs() <= 3.0 / (n as f64).sqrt(), "mean {mean}");
        let incr: Vec<f64> = (0..n).map(|p| e.state(1000, p)[0] - e.state(0, p)[0]).collect();
        let (mi, _) = mean_stderr(&incr);
        let var = incr.iter().map(|v| (v - mi).powi(2)).sum::<f64>() / (n - 1) as f64;
        assert!((var - 1.0).abs() <= 0.05, "var {var}");

        // Var(X_t) = σ²(t − a) within 5 standard errors; se(var) ≈ var·√(2/(n−1))
        for m in [250, 500, 750] {
            let (_, v) = e.moments(m);
            let expect = grid.time(m) - 1.0;
            assert!((v[0] - expect).abs() <= 5.0 * expect * (2.0 / (n as f64 - 1.0)).sqrt());
        }
    }

    #[test]
    fn translation_equivariance() {
        let grid = TimeGrid::new(0.0, 1.0, 200).unwrap();
        let m0 = DiffusionModel::brownian(2, 0.7, InitialLaw::Point(vec![0.25, -1.0])).unwrap();
        let m1 = DiffusionModel::brownian(2, 0.7, InitialLaw::Point(vec![3.25, 1.5])).unwrap();
        let e0 = simulate(&m0, &grid, 64, 5).unwrap();
        let e1 = simulate(&m1, &grid, 64, 5).unwrap();
        for (i, (a, b)) in e0.values().iter().zip(e1.values()).enumerate() {
            let shift = if i % 2 == 0 { 3.0 } else { 2.5 };
            assert!((a + shift - b).abs() <= 1e-12 * (1.0 + b.abs()), "{a} {b}");
        }
    }

    #[test]
    fn bitwise_reproducible_across_thread_counts() {
        let model = DiffusionModel::ornstein_uhlenbeck(2, 1.0, 1.0, InitialLaw::ou_stationary(2, 1.0, 1.0)).unwrap();
        let grid = TimeGrid::new(0.0, 1.0, 100).unwrap();
        let run = |threads| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| simulate(&model, &grid, 500, 42).unwrap())
        };
        let a = run(1);
        let b = run(4);
        assert!(a.values().iter().zip(b.values()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn non_finite_coefficients_are_reported() {
        let model = DiffusionModel::deterministic(1, |t, _, b| b[0] = if t > 0.5 { f64::NAN } else { 1.0 }, vec![0.0]).unwrap();
        let grid = TimeGrid::new(0.0, 1.0, 10).unwrap();
        match simulate(&model, &grid, 3, 0) {
            Err(Error::Simulation { path, t, .. }) => {
                assert_eq!(path, 0);
                assert!(t > 0.5);
            }
            other => panic!("expected simulation error, got {other:?}"),
        }
    }
}
