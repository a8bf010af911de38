//! Particle swarm search over the loss weights, kept on the probability
//! simplex by Euclidean projection after every move.

use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Dirichlet, Distribution};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::weights::{LossWeights, NUM_WEIGHTS};

/// Euclidean projection of an arbitrary finite vector onto
/// `{x : x ≥ 0, Σx = 1}` (sort-based).
pub fn project_onto_simplex(v: &[f64]) -> Result<Vec<f64>> {
    if v.is_empty() {
        return Err(Error::Contract("cannot project an empty vector".into()));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::Contract(format!("cannot project non-finite vector {v:?}")));
    }
    let mut u = v.to_vec();
    u.sort_by(|a, b| b.total_cmp(a));
    let mut cumulative = 0.0;
    let mut theta = 0.0;
    for (j, uj) in u.iter().enumerate() {
        cumulative += uj;
        let t = (cumulative - 1.0) / (j + 1) as f64;
        if uj - t > 0.0 {
            theta = t;
        }
    }
    Ok(v.iter().map(|x| (x - theta).max(0.0)).collect())
}

pub fn project_simplex(v: &[f64; NUM_WEIGHTS]) -> Result<LossWeights> {
    let p = project_onto_simplex(v)?;
    let mut out = [0.0; NUM_WEIGHTS];
    out.copy_from_slice(&p);
    LossWeights::new(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SwarmConfig {
    pub particle_num: usize,
    pub iterations: usize,
    pub w: f64,
    pub c1: f64,
    pub c2: f64,
    pub stagnation_k: usize,
    pub seed: u64,
}

impl Default for SwarmConfig {
    fn default() -> Self {
        SwarmConfig {
            particle_num: 20,
            iterations: 30,
            w: 0.729,
            c1: 1.494,
            c2: 1.494,
            stagnation_k: 3,
            seed: 0,
        }
    }
}

impl SwarmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.particle_num == 0 {
            return Err(Error::Config("pso.particle_num must be positive".into()));
        }
        if self.iterations == 0 {
            return Err(Error::Config("pso.iterations must be positive".into()));
        }
        if self.stagnation_k == 0 {
            return Err(Error::Config("pso.K must be positive".into()));
        }
        for (name, v) in [("pso.w", self.w), ("pso.c1", self.c1), ("pso.c2", self.c2)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Particle {
    pub position: LossWeights,
    pub velocity: [f64; NUM_WEIGHTS],
    pub best_position: LossWeights,
    pub best_fitness: f64,
}

/// A deterministic map from weights to a score; higher is better.
pub trait Fitness: Sync {
    fn evaluate(&self, w: &LossWeights) -> Result<f64>;
}

impl<F> Fitness for F
where
    F: Fn(&LossWeights) -> Result<f64> + Sync,
{
    fn evaluate(&self, w: &LossWeights) -> Result<f64> {
        self(w)
    }
}

/// Adapts an infallible closure.
pub struct Infallible<F>(pub F);

impl<F> Fitness for Infallible<F>
where
    F: Fn(&LossWeights) -> f64 + Sync,
{
    fn evaluate(&self, w: &LossWeights) -> Result<f64> {
        Ok((self.0)(w))
    }
}

fn evaluate_all(fitness: &dyn Fitness, positions: &[LossWeights]) -> Result<Vec<f64>> {
    let values: Vec<Result<f64>> = positions.par_iter().map(|p| fitness.evaluate(p)).collect();
    values
        .into_iter()
        .zip(positions)
        .map(|(v, p)| {
            let v = v?;
            if v.is_nan() {
                return Err(Error::NonFinite(format!("fitness at {:?}", p.as_array())));
            }
            Ok(v)
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct Swarm {
    pub particles: Vec<Particle>,
    pub global_best: LossWeights,
    pub global_best_fitness: f64,
    streams: Vec<ChaCha8Rng>,
}

fn particle_stream(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64 + 1);
    rng
}

impl Swarm {
    /// Dirichlet(1) positions, zero velocities. With an incumbent, particle
    /// 0 starts there instead.
    pub fn init(cfg: &SwarmConfig, incumbent: Option<LossWeights>, fitness: &dyn Fitness) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let dirichlet = Dirichlet::new([1.0; NUM_WEIGHTS]).expect("valid concentration");
        let mut positions = Vec::with_capacity(cfg.particle_num);
        for i in 0..cfg.particle_num {
            let draw = dirichlet.sample(&mut rng);
            positions.push(match (i, incumbent) {
                (0, Some(w)) => w,
                _ => project_simplex(&draw)?,
            });
        }
        Swarm::with_positions(positions, cfg, fitness)
    }

    pub fn with_positions(positions: Vec<LossWeights>, cfg: &SwarmConfig, fitness: &dyn Fitness) -> Result<Self> {
        if positions.is_empty() {
            return Err(Error::Contract("swarm needs at least one particle".into()));
        }
        let values = evaluate_all(fitness, &positions)?;
        let particles: Vec<Particle> = positions
            .into_iter()
            .zip(values)
            .map(|(p, f)| Particle {
                position: p,
                velocity: [0.0; NUM_WEIGHTS],
                best_position: p,
                best_fitness: f,
            })
            .collect();
        let mut best = 0;
        for (i, p) in particles.iter().enumerate() {
            if p.best_fitness > particles[best].best_fitness {
                best = i;
            }
        }
        let streams = (0..particles.len()).map(|i| particle_stream(cfg.seed, i)).collect();
        Ok(Swarm {
            global_best: particles[best].best_position,
            global_best_fitness: particles[best].best_fitness,
            particles,
            streams,
        })
    }

    /// One velocity/position update for every particle, then a parallel
    /// fitness pass and in-order best updates (strict improvement only).
    /// Per coordinate, `r1` is drawn before `r2` from the particle's stream.
    pub fn step(&mut self, cfg: &SwarmConfig, fitness: &dyn Fitness) -> Result<()> {
        let gbest = *self.global_best.as_array();
        for (p, rng) in self.particles.iter_mut().zip(&mut self.streams) {
            let x = *p.position.as_array();
            let pbest = *p.best_position.as_array();
            let mut moved = [0.0; NUM_WEIGHTS];
            for d in 0..NUM_WEIGHTS {
                let r1: f64 = rng.random();
                let r2: f64 = rng.random();
                p.velocity[d] = cfg.w * p.velocity[d] + cfg.c1 * r1 * (pbest[d] - x[d]) + cfg.c2 * r2 * (gbest[d] - x[d]);
                moved[d] = x[d] + p.velocity[d];
            }
            p.position = project_simplex(&moved)?;
        }
        let positions: Vec<LossWeights> = self.particles.iter().map(|p| p.position).collect();
        let values = evaluate_all(fitness, &positions)?;
        for (p, f) in self.particles.iter_mut().zip(values) {
            if f > p.best_fitness {
                p.best_fitness = f;
                p.best_position = p.position;
            }
            if f > self.global_best_fitness {
                self.global_best_fitness = f;
                self.global_best = p.position;
            }
        }
        Ok(())
    }
}

/// Outcome of a full optimization: the best weights, their fitness and the
/// global best after every iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PsoResult {
    pub best: LossWeights,
    pub best_fitness: f64,
    pub history: Vec<f64>,
}

pub fn optimize_weights(fitness: &dyn Fitness, cfg: &SwarmConfig, incumbent: Option<LossWeights>) -> Result<PsoResult> {
    let mut swarm = Swarm::init(cfg, incumbent, fitness)?;
    let mut history = Vec::with_capacity(cfg.iterations);
    for _ in 0..cfg.iterations {
        swarm.step(cfg, fitness)?;
        history.push(swarm.global_best_fitness);
    }
    Ok(PsoResult {
        best: swarm.global_best,
        best_fitness: swarm.global_best_fitness,
        history,
    })
}

/// True iff there are at least `k` scores and the last `k` are all
/// strictly below `s_best`.
pub fn stagnation_gate(recent: &[f64], s_best: f64, k: usize) -> bool {
    k > 0 && recent.len() >= k && recent[recent.len() - k..].iter().all(|s| *s < s_best)
}

pub fn write_history_csv(path: impl AsRef<Path>, history: &[f64]) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::from("iteration,best_fitness\n");
    for (i, f) in history.iter().enumerate() {
        out.push_str(&format!("{},{}\n", i + 1, f));
    }
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(format!("creating {}", path.display()), e))?;
    file.write_all(out.as_bytes())
        .map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn sphere() -> Infallible<impl Fn(&LossWeights) -> f64 + Sync> {
        Infallible(|w: &LossWeights| -w.as_array().iter().map(|x| x * x).sum::<f64>())
    }

    #[test]
    fn projection_examples() {
        let u = project_simplex(&[0.2; 5]).unwrap();
        assert_eq!(u.as_array(), &[0.2; 5]);
        assert_eq!(project_simplex(&[2.0, 0.0, 0.0, 0.0, 0.0]).unwrap(), LossWeights::vertex(1));
        let half = project_simplex(&[0.5; 5]).unwrap();
        for x in half.as_array() {
            assert!((x - 0.2).abs() < 1e-12);
        }
        assert!(project_simplex(&[f64::NAN, 0.0, 0.0, 0.0, 0.0]).is_err());
    }

    proptest! {
        #[test]
        fn projection_lands_on_simplex(v in prop::array::uniform5(-10.0f64..10.0)) {
            let p = project_simplex(&v).unwrap();
            let sum: f64 = p.as_array().iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-9);
            prop_assert!(p.as_array().iter().all(|x| *x >= 0.0));
            let again = project_simplex(p.as_array()).unwrap();
            for (a, b) in again.as_array().iter().zip(p.as_array()) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn init_is_deterministic_and_feasible() {
        let cfg = SwarmConfig {
            seed: 11,
            ..SwarmConfig::default()
        };
        let a = Swarm::init(&cfg, None, &sphere()).unwrap();
        let b = Swarm::init(&cfg, None, &sphere()).unwrap();
        assert_eq!(a.particles.len(), 20);
        assert_eq!(a.particles, b.particles);
        for p in &a.particles {
            assert_eq!(p.velocity, [0.0; 5]);
            assert!((p.position.as_array().iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
        let warm = Swarm::init(&cfg, Some(LossWeights::vertex(2)), &sphere()).unwrap();
        assert_eq!(warm.particles[0].position, LossWeights::vertex(2));
    }

    #[test]
    fn frozen_dynamics_do_not_move() {
        let cfg = SwarmConfig {
            w: 0.0,
            c1: 0.0,
            c2: 0.0,
            seed: 3,
            ..SwarmConfig::default()
        };
        let mut s = Swarm::init(&cfg, None, &sphere()).unwrap();
        let before: Vec<LossWeights> = s.particles.iter().map(|p| p.position).collect();
        s.step(&cfg, &sphere()).unwrap();
        for (p, b) in s.particles.iter().zip(&before) {
            for (x, y) in p.position.as_array().iter().zip(b.as_array()) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn two_particle_step_matches_hand_update() {
        let cfg = SwarmConfig {
            particle_num: 2,
            seed: 5,
            ..SwarmConfig::default()
        };
        let lin = Infallible(|w: &LossWeights| w.entity());
        let a = LossWeights::new([0.4, 0.3, 0.1, 0.1, 0.1]).unwrap();
        let b = LossWeights::new([0.1, 0.1, 0.5, 0.2, 0.1]).unwrap();
        let mut s = Swarm::with_positions(vec![a, b], &cfg, &lin).unwrap();
        assert_eq!(s.global_best, b);
        s.step(&cfg, &lin).unwrap();

        // particle 0: v = c1·r1·0 + c2·r2·(b − a); particle 1 sits at both bests, so it stays.
        let mut rng = particle_stream(5, 0);
        let mut moved = [0.0; 5];
        for d in 0..5 {
            let _r1: f64 = Rng::random(&mut rng);
            let r2: f64 = Rng::random(&mut rng);
            moved[d] = a.as_array()[d] + 1.494 * r2 * (b.as_array()[d] - a.as_array()[d]);
        }
        let expected = project_simplex(&moved).unwrap();
        for (x, y) in s.particles[0].position.as_array().iter().zip(expected.as_array()) {
            assert!((x - y).abs() < 1e-12);
        }
        for (x, y) in s.particles[1].position.as_array().iter().zip(b.as_array()) {
            assert!((x - y).abs() < 1e-12);
        }
        assert_eq!(s.particles[1].velocity, [0.0; 5]);
    }

    #[test]
    fn sphere_and_vertex() {
        let r = optimize_weights(&sphere(), &SwarmConfig::default(), None).unwrap();
        assert_eq!(r.history.len(), 30);
        assert!(r.history.windows(2).all(|w| w[1] >= w[0]));
        for x in r.best.as_array() {
            assert!((x - 0.2).abs() < 1e-2, "{:?}", r.best);
        }
        assert!((r.best_fitness + 0.2).abs() < 1e-3);
        let v = optimize_weights(&Infallible(|w: &LossWeights| w.entity()), &SwarmConfig::default(), None).unwrap();
        assert!(v.best.entity() >= 0.98, "{:?}", v.best);
    }

    #[test]
    fn constant_fitness_keeps_an_initial_position() {
        let cfg = SwarmConfig {
            seed: 9,
            ..SwarmConfig::default()
        };
        let flat = Infallible(|_: &LossWeights| 1.5);
        let init = Swarm::init(&cfg, None, &flat).unwrap();
        let r = optimize_weights(&flat, &cfg, None).unwrap();
        assert_eq!(r.best, init.particles[0].position);
        assert!(r.history.iter().all(|h| *h == 1.5));
    }

    #[test]
    fn gate_examples() {
        assert!(stagnation_gate(&[1.0, 1.0, 1.0], 2.0, 3));
        assert!(!stagnation_gate(&[1.0, 2.0, 1.0], 2.0, 3));
        assert!(!stagnation_gate(&[1.0, 1.0], 2.0, 3));
        assert!(stagnation_gate(&[5.0, 1.0, 1.0, 1.0], 2.0, 3));
    }

    #[test]
    fn history_csv_layout() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("h.csv");
        write_history_csv(&path, &[-0.5, -0.25]).unwrap();
        assert_eq!(
            std::fs::read_to_string(path).unwrap(),
            "iteration,best_fitness\n1,-0.5\n2,-0.25\n"
        );
    }
}
