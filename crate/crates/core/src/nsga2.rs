//! NSGA-II over the unit hypercube, maximizing three objectives.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Objectives = [f64; 3];

/// Archive members closer than this in L∞ are considered duplicates.
pub const DEDUP_TOL: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvolutionConfig {
    pub population: usize,
    pub generations: usize,
    pub crossover_prob: f64,
    pub eta_crossover: f64,
    /// Per-variable mutation probability; `None` means `1/d`.
    pub mutation_prob: Option<f64>,
    pub eta_mutation: f64,
    pub seed: u64,
}

impl Default for EvolutionConfig {
    fn default() -> Self {
        Self {
            population: 100,
            generations: 50,
            crossover_prob: 0.9,
            eta_crossover: 15.0,
            mutation_prob: None,
            eta_mutation: 20.0,
            seed: 0,
        }
    }
}

impl EvolutionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.population < 4 || self.population % 2 != 0 {
            return Err(Error::Config(format!(
                "population size must be even and at least 4, got {}",
                self.population
            )));
        }
        Ok(())
    }
}

/// Final nondominated set with objective values.
#[derive(Clone, Debug, PartialEq)]
pub struct ParetoArchive {
    pub members: Vec<(Vec<f64>, Objectives)>,
}

impl ParetoArchive {
    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn points(&self) -> Vec<Vec<f64>> {
        self.members.iter().map(|(p, _)| p.clone()).collect()
    }
}

/// `a` dominates `b` under maximization.
pub fn dominates(a: &Objectives, b: &Objectives) -> bool {
    let mut strictly = false;
    for k in 0..3 {
        if a[k] < b[k] {
            return false;
        }
        if a[k] > b[k] {
            strictly = true;
        }
    }
    strictly
}

/// Fast nondominated sort. Returns fronts as index lists, best first.
pub fn nondominated_sort(points: &[Objectives]) -> Vec<Vec<usize>> {
    let n = points.len();
    let mut dominated_by_me: Vec<Vec<usize>> = vec![Vec::new(); n];
    let mut count = vec![0usize; n];
    for i in 0..n {
        for j in (i + 1)..n {
            if dominates(&points[i], &points[j]) {
                dominated_by_me[i].push(j);
                count[j] += 1;
            } else if dominates(&points[j], &points[i]) {
                dominated_by_me[j].push(i);
                count[i] += 1;
            }
        }
    }
    let mut fronts = Vec::new();
    let mut current: Vec<usize> = (0..n).filter(|&i| count[i] == 0).collect();
    while !current.is_empty() {
        let mut next = Vec::new();
        for &i in &current {
            for &j in &dominated_by_me[i] {
                count[j] -= 1;
                if count[j] == 0 {
                    next.push(j);
                }
            }
        }
        next.sort_unstable();
        fronts.push(current);
        current = next;
    }
    fronts
}

/// Crowding distance within one front. Boundary points get `+∞`; an
/// objective whose range is below 1e-12 adds nothing to interior points.
pub fn crowding_distance(front: &[Objectives]) -> Vec<f64> {
    let n = front.len();
    let mut dist = vec![0.0; n];
    if n <= 2 {
        return vec![f64::INFINITY; n];
    }
    for k in 0..3 {
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| front[a][k].total_cmp(&front[b][k]).then(a.cmp(&b)));
        dist[order[0]] = f64::INFINITY;
        dist[order[n - 1]] = f64::INFINITY;
        let range = front[order[n - 1]][k] - front[order[0]][k];
        if range < 1e-12 {
            continue;
        }
        for w in 1..n - 1 {
            let i = order[w];
            if dist[i].is_finite() {
                dist[i] += (front[order[w + 1]][k] - front[order[w - 1]][k]) / range;
            }
        }
    }
    dist
}

#[derive(Clone, Debug)]
struct Individual {
    x: Vec<f64>,
    f: Objectives,
    valid: bool,
    rank: usize,
    crowding: f64,
}

/// Rank and crowding for a whole population; invalid members form a last
/// front of their own.
fn assign_rank_crowding(pop: &mut [Individual]) {
    let valid: Vec<usize> = (0..pop.len()).filter(|&i| pop[i].valid).collect();
    let objs: Vec<Objectives> = valid.iter().map(|&i| pop[i].f).collect();
    let fronts = nondominated_sort(&objs);
    for (r, front) in fronts.iter().enumerate() {
        let fo: Vec<Objectives> = front.iter().map(|&i| objs[i]).collect();
        let cd = crowding_distance(&fo);
        for (w, &i) in front.iter().enumerate() {
            pop[valid[i]].rank = r;
            pop[valid[i]].crowding = cd[w];
        }
    }
    let last = fronts.len();
    for ind in pop.iter_mut().filter(|p| !p.valid) {
        ind.rank = last;
        ind.crowding = 0.0;
    }
}

fn better(a: &Individual, b: &Individual) -> bool {
    a.rank < b.rank || (a.rank == b.rank && a.crowding > b.crowding)
}

/// Per-generation maximum of each objective over the population.
pub type EvolutionHistory = Vec<Objectives>;

/// Runs NSGA-II and returns the deduplicated rank-0 set of the final
/// population. `objective` is called with whole generations at once.
pub fn evolve<F>(objective: F, dim: usize, cfg: &EvolutionConfig) -> Result<ParetoArchive>
where
    F: FnMut(&[Vec<f64>]) -> Vec<Objectives>,
{
    evolve_with_history(objective, dim, cfg).map(|(a, _)| a)
}

pub fn evolve_with_history<F>(
    mut objective: F,
    dim: usize,
    cfg: &EvolutionConfig,
) -> Result<(ParetoArchive, EvolutionHistory)>
where
    F: FnMut(&[Vec<f64>]) -> Vec<Objectives>,
{
    cfg.validate()?;
    if dim == 0 {
        return Err(Error::InvalidInput("zero-dimensional search space".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let pm = cfg.mutation_prob.unwrap_or(1.0 / dim as f64);
    let n = cfg.population;

    let xs: Vec<Vec<f64>> = (0..n)
        .map(|_| (0..dim).map(|_| rng.random::<f64>()).collect())
        .collect();
    let mut pop = evaluate(&mut objective, xs);
    assign_rank_crowding(&mut pop);
    let mut history = vec![population_best(&pop)];

    for _ in 0..cfg.generations {
        let mut children = Vec::with_capacity(n);
        while children.len() < n {
            let p1 = tournament(&pop, &mut rng);
            let p2 = tournament(&pop, &mut rng);
            let (mut c1, mut c2) = if rng.random::<f64>() < cfg.crossover_prob {
                sbx(&pop[p1].x, &pop[p2].x, cfg.eta_crossover, &mut rng)
            } else {
                (pop[p1].x.clone(), pop[p2].x.clone())
            };
            polynomial_mutation(&mut c1, pm, cfg.eta_mutation, &mut rng);
            polynomial_mutation(&mut c2, pm, cfg.eta_mutation, &mut rng);
            children.push(c1);
            children.push(c2);
        }
        let offspring = evaluate(&mut objective, children);
        pop.extend(offspring);
        assign_rank_crowding(&mut pop);
        let mut order: Vec<usize> = (0..pop.len()).collect();
        order.sort_by(|&a, &b| {
            pop[a]
                .rank
                .cmp(&pop[b].rank)
                .then(pop[b].crowding.total_cmp(&pop[a].crowding))
                .then(a.cmp(&b))
        });
        let mut survivors: Vec<Individual> = order.into_iter().take(n).map(|i| pop[i].clone()).collect();
        assign_rank_crowding(&mut survivors);
        pop = survivors;
        history.push(population_best(&pop));
    }

    let mut members: Vec<(Vec<f64>, Objectives)> = Vec::new();
    for ind in pop.iter().filter(|p| p.rank == 0 && p.valid) {
        let dup = members
            .iter()
            .any(|(m, _)| m.iter().zip(&ind.x).all(|(a, b)| (a - b).abs() <= DEDUP_TOL));
        if !dup {
            members.push((ind.x.clone(), ind.f));
        }
    }
    if members.is_empty() {
        // every candidate was invalid; fall back to the first individual
        members.push((pop[0].x.clone(), pop[0].f));
    }
    Ok((ParetoArchive { members }, history))
}

fn evaluate<F>(objective: &mut F, xs: Vec<Vec<f64>>) -> Vec<Individual>
where
    F: FnMut(&[Vec<f64>]) -> Vec<Objectives>,
{
    let fs = objective(&xs);
    assert_eq!(fs.len(), xs.len(), "objective returned wrong batch size");
    xs.into_iter()
        .zip(fs)
        .map(|(x, f)| Individual {
            valid: f.iter().all(|v| v.is_finite()),
            x,
            f,
            rank: 0,
            crowding: 0.0,
        })
        .collect()
}

fn population_best(pop: &[Individual]) -> Objectives {
    let mut best = [f64::NEG_INFINITY; 3];
    for p in pop.iter().filter(|p| p.valid) {
        for k in 0..3 {
            best[k] = best[k].max(p.f[k]);
        }
    }
    best
}

fn tournament<R: Rng>(pop: &[Individual], rng: &mut R) -> usize {
    let a = rng.random_range(0..pop.len());
    let mut b = rng.random_range(0..pop.len() - 1);
    if b >= a {
        b += 1;
    }
    if better(&pop[b], &pop[a]) {
        b
    } else {
        a
    }
}

/// Bounded simulated binary crossover on `[0, 1]`.
fn sbx<R: Rng>(a: &[f64], b: &[f64], eta: f64, rng: &mut R) -> (Vec<f64>, Vec<f64>) {
    let mut c1 = a.to_vec();
    let mut c2 = b.to_vec();
    for i in 0..a.len() {
        if rng.random::<f64>() > 0.5 {
            continue;
        }
        let (y1, y2) = if a[i] < b[i] { (a[i], b[i]) } else { (b[i], a[i]) };
        if (y2 - y1).abs() < 1e-14 {
            continue;
        }
        let (lo, hi) = (0.0, 1.0);
        let u: f64 = rng.random();
        let spread = |beta: f64| {
            let alpha = 2.0 - beta.powf(-(eta + 1.0));
            if u <= 1.0 / alpha {
                (u * alpha).powf(1.0 / (eta + 1.0))
            } else {
                (1.0 / (2.0 - u * alpha)).powf(1.0 / (eta + 1.0))
            }
        };
        let beta1 = 1.0 + 2.0 * (y1 - lo) / (y2 - y1);
        let child1 = 0.5 * ((y1 + y2) - spread(beta1) * (y2 - y1));
        let beta2 = 1.0 + 2.0 * (hi - y2) / (y2 - y1);
        let child2 = 0.5 * ((y1 + y2) + spread(beta2) * (y2 - y1));
        let (child1, child2) = (child1.clamp(lo, hi), child2.clamp(lo, hi));
        if rng.random::<f64>() < 0.5 {
            c1[i] = child2;
            c2[i] = child1;
        } else {
            c1[i] = child1;
            c2[i] = child2;
        }
    }
    (c1, c2)
}

/// Bounded polynomial mutation on `[0, 1]`.
fn polynomial_mutation<R: Rng>(x: &mut [f64], prob: f64, eta: f64, rng: &mut R) {
    for v in x.iter_mut() {
        if rng.random::<f64>() >= prob {
            continue;
        }
        let y = *v;
        let (d1, d2) = (y, 1.0 - y);
        let u: f64 = rng.random();
        let p = 1.0 / (eta + 1.0);
        let dq = if u < 0.5 {
            let xy = 1.0 - d1;
            let val = 2.0 * u + (1.0 - 2.0 * u) * xy.powf(eta + 1.0);
            val.powf(p) - 1.0
        } else {
            let xy = 1.0 - d2;
            let val = 2.0 * (1.0 - u) + 2.0 * (u - 0.5) * xy.powf(eta + 1.0);
            1.0 - val.powf(p)
        };
        *v = (y + dq).clamp(0.0, 1.0);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn total_domination_gives_two_fronts() {
        let f = nondominated_sort(&[[1.0, 1.0, 1.0], [2.0, 2.0, 2.0]]);
        assert_eq!(f, vec![vec![1], vec![0]]);
    }

    #[test]
    fn incomparable_pair_shares_front() {
        let f = nondominated_sort(&[[1.0, 2.0, 0.0], [2.0, 1.0, 0.0]]);
        assert_eq!(f, vec![vec![0, 1]]);
    }

    #[test]
    fn two_point_front_is_all_boundary() {
        let d = crowding_distance(&[[0.0, 1.0, 2.0], [1.0, 0.0, 5.0]]);
        assert!(d.iter().all(|v| v.is_infinite()));
    }

    #[test]
    fn collinear_middle_distance() {
        let d = crowding_distance(&[[0.0, 5.0, 5.0], [1.0, 5.0, 5.0], [2.0, 5.0, 5.0]]);
        assert!(d[0].is_infinite() && d[2].is_infinite());
        assert_eq!(d[1], 1.0);
    }

    #[test]
    fn identical_points_degenerate_rule() {
        let d = crowding_distance(&[[1.0; 3]; 5]);
        assert!(d[0].is_infinite() && d[4].is_infinite());
        assert!(d[1..4].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn odd_population_rejected() {
        let cfg = EvolutionConfig {
            population: 7,
            ..Default::default()
        };
        assert!(evolve(|xs| vec![[0.0; 3]; xs.len()], 2, &cfg).is_err());
    }
}
