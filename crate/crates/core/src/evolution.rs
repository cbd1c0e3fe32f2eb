//! Constrained evolutionary search and the exhaustive oracle.

use std::cmp::Ordering;
use std::collections::HashMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cost::{genome_cost, Budget, Cost};
use crate::error::{Error, Result};
use crate::evaluator::Evaluator;
use crate::par::{self, Execution};
use crate::space::{Genome, SpaceDescriptor, GENE_COUNT, SCHEMA_VERSION};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CrossoverKind {
    #[default]
    Uniform,
    SinglePoint,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchConfig {
    pub schema_version: u32,
    pub population_size: usize,
    pub generations: usize,
    pub parent_k: usize,
    pub mutation_prob: f64,
    pub crossover_fraction: f64,
    pub crossover: CrossoverKind,
    pub budget: Budget,
    pub rng_seed: u64,
    pub max_rejection_tries: usize,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            population_size: 64,
            generations: 40,
            parent_k: 16,
            mutation_prob: 0.1,
            crossover_fraction: 0.5,
            crossover: CrossoverKind::Uniform,
            budget: Budget::unlimited(),
            rng_seed: 0,
            max_rejection_tries: 1000,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.schema_version != SCHEMA_VERSION {
            return bad(format!("schema_version {} (expected {SCHEMA_VERSION})", self.schema_version));
        }
        if self.population_size == 0 {
            return bad("population_size must be at least 1".into());
        }
        if self.parent_k == 0 || self.parent_k > self.population_size {
            return bad(format!("parent_k {} not in [1, population_size]", self.parent_k));
        }
        if !(0.0..=1.0).contains(&self.mutation_prob) {
            return bad(format!("mutation_prob {} not in [0, 1]", self.mutation_prob));
        }
        if !(0.0..=1.0).contains(&self.crossover_fraction) {
            return bad(format!("crossover_fraction {} not in [0, 1]", self.crossover_fraction));
        }
        if self.max_rejection_tries == 0 {
            return bad("max_rejection_tries must be at least 1".into());
        }
        Ok(())
    }
}

/// Resamples each gene uniformly from its choice set with probability `p`.
pub fn mutate<R: Rng + ?Sized>(g: &Genome, space: &SpaceDescriptor, p: f64, rng: &mut R) -> Genome {
    let mut genes = g.genes();
    for (pos, gene) in genes.iter_mut().enumerate() {
        if rng.random_bool(p) {
            let set = space.choices(pos);
            *gene = set[rng.random_range(0..set.len())];
        }
    }
    Genome::from_genes(&genes)
}

pub fn crossover<R: Rng + ?Sized>(
    a: &Genome,
    b: &Genome,
    space: &SpaceDescriptor,
    kind: CrossoverKind,
    rng: &mut R,
) -> Result<Genome> {
    if !space.contains(a) || !space.contains(b) {
        return Err(Error::OutsideSpace);
    }
    let (ga, gb) = (a.genes(), b.genes());
    let mut out = ga;
    match kind {
        CrossoverKind::Uniform => {
            for (o, &v) in out.iter_mut().zip(&gb) {
                if rng.random_bool(0.5) {
                    *o = v;
                }
            }
        }
        CrossoverKind::SinglePoint => {
            let cut = rng.random_range(1..GENE_COUNT);
            out[cut..].copy_from_slice(&gb[cut..]);
        }
    }
    Ok(Genome::from_genes(&out))
}

fn cost_of(g: &Genome) -> Cost {
    genome_cost(g).expect("genomes drawn from a space are valid")
}

/// Rejection-samples until a proposal fits the budget. Returns the genome and
/// the number of rejected proposals.
fn sample_counted<R: Rng + ?Sized>(
    space: &SpaceDescriptor,
    budget: &Budget,
    rng: &mut R,
    max_tries: usize,
) -> Result<(Genome, usize)> {
    for rejected in 0..max_tries.max(1) {
        let g = space.sample(rng);
        if cost_of(&g).within(budget) {
            return Ok((g, rejected));
        }
    }
    Err(Error::Exhausted { tries: max_tries })
}

pub fn sample_feasible<R: Rng + ?Sized>(
    space: &SpaceDescriptor,
    budget: &Budget,
    rng: &mut R,
    max_tries: usize,
) -> Result<Genome> {
    sample_counted(space, budget, rng, max_tries).map(|(g, _)| g)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scored {
    pub genome: Genome,
    pub fitness: f64,
    pub cost: Cost,
}

/// Search ranking: higher fitness first, then fewer MACs, then encoding.
pub fn rank_cmp(a: &Scored, b: &Scored) -> Ordering {
    b.fitness
        .total_cmp(&a.fitness)
        .then(a.cost.macs.cmp(&b.cost.macs))
        .then_with(|| a.genome.encode().cmp(&b.genome.encode()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationStats {
    pub generation: usize,
    pub best_fitness: f64,
    pub mean_fitness: f64,
    pub best_macs: u64,
    pub best_params: u64,
    pub rejections: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchResult {
    pub schema_version: u32,
    pub best: Scored,
    /// Infeasible proposals rejected while building the initial population.
    pub initial_rejections: usize,
    pub history: Vec<GenerationStats>,
    /// Distinct genomes passed to the evaluator.
    pub evaluations: usize,
}

fn checked(g: &Genome, r: Result<f64>) -> Result<f64> {
    let wrap = |e: Error| Error::Evaluation { genome: g.encode(), source: Box::new(e) };
    match r {
        Ok(f) if f.is_finite() => Ok(f),
        Ok(f) => Err(wrap(Error::NonFiniteFitness(f))),
        Err(e) => Err(wrap(e)),
    }
}

struct FitnessCache<'e> {
    eval: &'e dyn Evaluator,
    exec: Execution,
    seen: HashMap<Genome, f64>,
}

impl FitnessCache<'_> {
    fn score(&mut self, pop: Vec<Genome>) -> Result<Vec<Scored>> {
        let mut fresh: Vec<Genome> = pop.iter().filter(|g| !self.seen.contains_key(*g)).cloned().collect();
        fresh.sort();
        fresh.dedup();
        let eval = self.eval;
        let scores = par::map(self.exec, &fresh, |g| checked(g, eval.evaluate(g)));
        for (g, s) in fresh.into_iter().zip(scores) {
            self.seen.insert(g, s?);
        }
        Ok(pop
            .into_iter()
            .map(|g| {
                let fitness = self.seen[&g];
                let cost = cost_of(&g);
                Scored { genome: g, fitness, cost }
            })
            .collect())
    }
}

fn slot_rng(seed: u64, generation: usize, slot: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((generation as u64) << 32) | slot as u64);
    rng
}

/// Produces one feasible offspring for `slot`, returning it with its rejection count.
fn offspring(
    cfg: &SearchConfig,
    space: &SpaceDescriptor,
    parents: &[Scored],
    generation: usize,
    slot: usize,
    by_crossover: bool,
) -> Result<(Genome, usize)> {
    let mut rng = slot_rng(cfg.rng_seed, generation, slot);
    for rejected in 0..cfg.max_rejection_tries {
        let child = if by_crossover {
            let i = rng.random_range(0..parents.len());
            let mut j = rng.random_range(0..parents.len());
            if parents.len() > 1 {
                while j == i {
                    j = rng.random_range(0..parents.len());
                }
            }
            crossover(&parents[i].genome, &parents[j].genome, space, cfg.crossover, &mut rng)?
        } else {
            let p = &parents[rng.random_range(0..parents.len())];
            mutate(&p.genome, space, cfg.mutation_prob, &mut rng)
        };
        if cost_of(&child).within(&cfg.budget) {
            return Ok((child, rejected));
        }
    }
    Err(Error::Exhausted { tries: cfg.max_rejection_tries })
}

/// Runs the evolutionary search. Results depend only on the config, the space
/// and the evaluator; every candidate draws from its own RNG stream, so the
/// execution mode never changes the outcome.
pub fn run_search(
    cfg: &SearchConfig,
    space: &SpaceDescriptor,
    eval: &dyn Evaluator,
    exec: Execution,
) -> Result<SearchResult> {
    cfg.validate()?;
    let mut cache = FitnessCache { eval, exec, seen: HashMap::new() };

    let init = par::map_range(exec, cfg.population_size, |slot| {
        sample_counted(space, &cfg.budget, &mut slot_rng(cfg.rng_seed, 0, slot), cfg.max_rejection_tries)
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let initial_rejections = init.iter().map(|(_, r)| r).sum();
    let mut pop = cache.score(init.into_iter().map(|(g, _)| g).collect())?;
    pop.sort_by(rank_cmp);
    let mut best = pop[0].clone();

    let n_cross = (cfg.crossover_fraction * (cfg.population_size - 1) as f64).round() as usize;
    let mut history = Vec::with_capacity(cfg.generations);
    for generation in 1..=cfg.generations {
        let parents = &pop[..cfg.parent_k];
        let children = par::map_range(exec, cfg.population_size - 1, |i| {
            offspring(cfg, space, parents, generation, i + 1, i < n_cross)
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
        let rejections = children.iter().map(|(_, r)| r).sum();
        let mut next = vec![best.genome.clone()];
        next.extend(children.into_iter().map(|(g, _)| g));
        pop = cache.score(next)?;
        pop.sort_by(rank_cmp);
        if rank_cmp(&pop[0], &best) == Ordering::Less {
            best = pop[0].clone();
        }
        let mean = pop.iter().map(|s| s.fitness).sum::<f64>() / pop.len() as f64;
        log::debug!("generation {generation}: best {:.6} mean {mean:.6}", best.fitness);
        history.push(GenerationStats {
            generation,
            best_fitness: best.fitness,
            mean_fitness: mean,
            best_macs: best.cost.macs,
            best_params: best.cost.params,
            rejections,
        });
    }
    Ok(SearchResult { schema_version: SCHEMA_VERSION, best, initial_rejections, history, evaluations: cache.seen.len() })
}

pub const DEFAULT_ENUMERATION_CAP: u128 = 1_000_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BruteForceResult {
    pub best: Scored,
    pub enumerated: u128,
    pub feasible: usize,
}

/// Exact feasible argmax over every genome of `space`, ranked as in
/// [`run_search`].
pub fn brute_force(
    space: &SpaceDescriptor,
    eval: &dyn Evaluator,
    budget: &Budget,
    cap: u128,
    exec: Execution,
) -> Result<BruteForceResult> {
    let cardinality = space.cardinality();
    if cardinality > cap {
        return Err(Error::CapExceeded { cardinality, cap });
    }
    let all: Vec<Genome> = space.iter().collect();
    let scored = par::map(exec, &all, |g| {
        let cost = cost_of(g);
        if !cost.within(budget) {
            return Ok(None);
        }
        let fitness = checked(g, eval.evaluate(g))?;
        Ok(Some(Scored { genome: g.clone(), fitness, cost }))
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let feasible: Vec<Scored> = scored.into_iter().flatten().collect();
    let n = feasible.len();
    let best = feasible.into_iter().min_by(rank_cmp).ok_or(Error::Exhausted { tries: all.len() })?;
    Ok(BruteForceResult { best, enumerated: cardinality, feasible: n })
}

/// Writes the per-generation log with header
/// `generation,best_fitness,mean_fitness,best_macs,best_params,rejections`.
pub fn write_history_csv(path: impl AsRef<Path>, history: &[GenerationStats]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    if history.is_empty() {
        w.write_record(["generation", "best_fitness", "mean_fitness", "best_macs", "best_params", "rejections"])?;
    }
    for h in history {
        w.serialize(h)?;
    }
    w.flush()?;
    Ok(())
}
