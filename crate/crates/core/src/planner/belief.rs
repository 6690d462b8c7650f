//! Particle belief over the static target cell.

use crate::pomdp::SearchModel;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Belief {
    n_cells: usize,
    particles: Vec<u32>,
}

impl Belief {
    /// Particles drawn uniformly over all cells.
    pub fn uniform(n_cells: usize, n_particles: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::uniform_with(n_cells, n_particles, &mut rng)
    }

    pub fn uniform_with<R: Rng + ?Sized>(n_cells: usize, n_particles: usize, rng: &mut R) -> Self {
        assert!(n_cells > 0 && n_particles > 0);
        let particles = (0..n_particles).map(|_| rng.random_range(0..n_cells) as u32).collect();
        Self { n_cells, particles }
    }

    pub fn point_mass(n_cells: usize, cell: usize, n_particles: usize) -> Self {
        Self {
            n_cells,
            particles: vec![cell as u32; n_particles],
        }
    }

    pub fn from_particles(n_cells: usize, particles: Vec<u32>) -> Self {
        Self { n_cells, particles }
    }

    pub fn len(&self) -> usize {
        self.particles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.particles.is_empty()
    }

    pub fn n_cells(&self) -> usize {
        self.n_cells
    }

    pub fn particles(&self) -> &[u32] {
        &self.particles
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        self.particles[rng.random_range(0..self.particles.len())] as usize
    }

    /// Normalized particle histogram over cells.
    pub fn histogram(&self) -> Vec<f64> {
        let mut h = vec![0.0; self.n_cells];
        let w = 1.0 / self.particles.len() as f64;
        for &p in &self.particles {
            h[p as usize] += w;
        }
        h
    }

    pub fn entropy(&self) -> f64 {
        self.histogram().iter().filter(|&&p| p > 0.0).map(|&p| -p * p.ln()).sum()
    }

    /// Most likely cell and its mass.
    pub fn mode(&self) -> (usize, f64) {
        self.histogram()
            .into_iter()
            .enumerate()
            .fold((0, -1.0), |best, (c, p)| if p > best.1 { (c, p) } else { best })
    }

    /// Reweights by `P(code | robot, target)`, conditions on the target not being
    /// under the robot, and resamples systematically to the same particle count.
    /// On depletion, `reinvigorate` of the particles are redrawn uniformly and the
    /// rest around the cells the observation points at.
    pub fn update<R: Rng + ?Sized>(&self, model: &SearchModel, robot: usize, code: usize, reinvigorate: f64, rng: &mut R) -> Belief {
        let n = self.particles.len();
        let weights: Vec<f64> = self
            .particles
            .iter()
            .map(|&p| {
                let p = p as usize;
                if p == robot {
                    0.0
                } else {
                    model.likelihood(robot, p, code)
                }
            })
            .collect();
        let total: f64 = weights.iter().sum();
        if total <= 0.0 {
            log::debug!("particle depletion at robot {robot}, code {code}; reinvigorating");
            return self.reinvigorated(model, robot, code, reinvigorate, rng);
        }
        let step = total / n as f64;
        let mut u = rng.random::<f64>() * step;
        let mut out = Vec::with_capacity(n);
        let mut acc = 0.0;
        let mut i = 0;
        for _ in 0..n {
            while i + 1 < n && acc + weights[i] <= u {
                acc += weights[i];
                i += 1;
            }
            out.push(self.particles[i]);
            u += step;
        }
        Belief {
            n_cells: self.n_cells,
            particles: out,
        }
    }

    fn reinvigorated<R: Rng + ?Sized>(&self, model: &SearchModel, robot: usize, code: usize, fraction: f64, rng: &mut R) -> Belief {
        let n = self.particles.len();
        let consistent: Vec<usize> = (0..self.n_cells)
            .filter(|&c| c != robot && model.likelihood(robot, c, code) > 0.0)
            .collect();
        let mut local: Vec<usize> = match model.cell_of_code(robot, code) {
            Some(seen) => {
                let mut around = vec![seen];
                for a in crate::pomdp::Action::ALL {
                    around.push(model.next_cell(seen, a));
                }
                around.sort_unstable();
                around.dedup();
                around.retain(|&c| c != robot);
                around
            }
            None => consistent.clone(),
        };
        if local.is_empty() {
            local = (0..self.n_cells).filter(|&c| c != robot).collect();
        }
        if local.is_empty() {
            local.push(robot);
        }
        let n_uniform = ((fraction.clamp(0.0, 1.0) * n as f64).round() as usize).min(n);
        let mut particles = Vec::with_capacity(n);
        for _ in 0..n_uniform {
            particles.push(rng.random_range(0..self.n_cells) as u32);
        }
        for _ in n_uniform..n {
            particles.push(local[rng.random_range(0..local.len())] as u32);
        }
        Belief {
            n_cells: self.n_cells,
            particles,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geogrid::{Cell, GridSpec};
    use crate::geometry::Vec2;
    use crate::pomdp::PomdpConfig;

    fn model(rows: usize, cols: usize) -> SearchModel {
        let grid = GridSpec::new(rows, cols, 1.0, Vec2::default()).unwrap();
        SearchModel::new(grid, PomdpConfig::default(), Cell::new(0, 0), vec![0.0; rows * cols]).unwrap()
    }

    #[test]
    fn uniform_counts_pass_chi_square() {
        let b = Belief::uniform(100, 100_000, 17);
        let expected = 1000.0;
        let counts = b.histogram().iter().map(|p| p * 100_000.0).collect::<Vec<_>>();
        for &c in &counts {
            assert!((c - expected).abs() < 4.0 * (expected * 0.99).sqrt());
        }
        let chi2: f64 = counts.iter().map(|c| (c - expected).powi(2) / expected).sum();
        // 99.9th percentile of chi-square with 99 degrees of freedom is about 148.2
        assert!(chi2 < 148.2, "{chi2}");
        assert_eq!(Belief::uniform(1, 50, 3).particles(), &[0; 50]);
        assert_eq!(Belief::uniform(100, 500, 5), Belief::uniform(100, 500, 5));
    }

    #[test]
    fn not_found_far_away_keeps_belief() {
        let m = model(10, 10);
        let b = Belief::point_mass(100, 99, 10).update(&m, 0, 0, 0.1, &mut ChaCha8Rng::seed_from_u64(1));
        assert_eq!(b.particles(), &[99; 10]);
    }

    #[test]
    fn particle_count_preserved_and_robot_cell_cleared() {
        let m = model(5, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let b = Belief::uniform(25, 1000, 2).update(&m, 12, 0, 0.1, &mut rng);
        assert_eq!(b.len(), 1000);
        assert!(b.particles().iter().all(|&p| p != 12));
    }

    #[test]
    fn depletion_reinvigorates_near_observed_cell() {
        let m = model(5, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        // all mass far away, yet the sensor reports the cell north of the robot
        let b = Belief::point_mass(25, 24, 200).update(&m, 0, 2, 0.1, &mut rng);
        assert_eq!(b.len(), 200);
        let h = b.histogram();
        let near: f64 = [5usize, 6, 10].iter().map(|&c| h[c]).sum();
        assert!(near > 0.8, "{near}");
    }
}
