//! Finite-difference verification suite: every graph primitive plus the full
//! training loss of a toy model.

use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autograd::{Graph, RowRef, Var};
use crate::data::corpus::{Corpus, Split};
use crate::data::synth::{generate_synthetic, SynthSpec};
use crate::error::Result;
use crate::gradcheck::{check_graph, GradCheckOptions, GradCheckReport};
use crate::model::{Kramt, ModelConfig};
use crate::params::{Bound, ParamStore};
use crate::tensor::Tensor;
use crate::train::{batch_loss, prepare_batch, sample_pairs, KnowledgeMode, Objective, PairPool, Tokenized, TrainContext, TrainSchedule};

pub const TOLERANCE: f64 = 1e-4;

#[derive(Clone, Copy, Debug, Serialize)]
pub struct VerifyOptions {
    /// Random instances per primitive.
    pub seeds: u64,
    pub coords_per_param: usize,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        VerifyOptions {
            seeds: 5,
            coords_per_param: 12,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct CaseReport {
    pub name: String,
    pub seed: u64,
    pub max_rel_error: f64,
    pub checked: usize,
    pub skipped_kinks: usize,
    pub below_noise: usize,
    pub worst_param: Option<String>,
}

impl CaseReport {
    fn new(name: &str, seed: u64, r: &GradCheckReport) -> Self {
        CaseReport {
            name: name.to_string(),
            seed,
            max_rel_error: r.max_rel_error,
            checked: r.checked,
            skipped_kinks: r.skipped_kinks,
            below_noise: r.below_noise,
            worst_param: r.worst.as_ref().map(|w| w.param.clone()),
        }
    }

    pub fn passed(&self) -> bool {
        self.checked > 0 && self.max_rel_error < TOLERANCE
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct VerifyReport {
    pub cases: Vec<CaseReport>,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub passed: bool,
    pub seconds: f64,
}

type Build = Box<dyn Fn(&mut Graph, &Bound) -> Result<Var>>;

/// Sums `out` weighted by a fixed random tensor so every output coordinate
/// carries its own adjoint.
fn project(g: &mut Graph, out: Var, seed: u64) -> Var {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0f_11);
    let shape = g.shape(out).to_vec();
    let w = g.leaf(&Tensor::randn(&shape, 1.0, &mut rng));
    let p = g.mul(out, w).expect("same shape");
    g.sum(p)
}

/// Parameters and loss builders exercising each primitive once.
pub fn primitive_cases(seed: u64) -> Result<(ParamStore, Vec<(&'static str, Build)>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = ParamStore::new();
    let a = p.insert("a", Tensor::randn(&[3, 4], 1.0, &mut rng))?;
    let b = p.insert("b", Tensor::randn(&[4, 5], 1.0, &mut rng))?;
    let c = p.insert("c", Tensor::randn(&[3, 4], 1.0, &mut rng))?;
    let bias = p.insert("bias", Tensor::randn(&[4], 1.0, &mut rng))?;
    let gamma = p.insert("gamma", Tensor::randn(&[4], 1.0, &mut rng))?;
    let beta = p.insert("beta", Tensor::randn(&[4], 1.0, &mut rng))?;
    let bt = p.insert("bt", Tensor::randn(&[5, 4], 1.0, &mut rng))?;
    let (batch, seq, heads) = (2, 4, 2);
    let q = p.insert("q", Tensor::randn(&[batch * seq, 6], 1.0, &mut rng))?;
    let k = p.insert("k", Tensor::randn(&[batch * seq, 6], 1.0, &mut rng))?;
    let v = p.insert("v", Tensor::randn(&[batch * seq, 6], 1.0, &mut rng))?;
    let mut mask: Vec<bool> = (0..batch * seq).map(|_| rng.gen_bool(0.75)).collect();
    mask[0] = true;
    let cases: Vec<(&'static str, Build)> = vec![
        ("matmul", Box::new(move |g, w| {
            let y = g.matmul(w[a], w[b])?;
            Ok(project(g, y, seed))
        })),
        ("matmul_nt", Box::new(move |g, w| {
            let y = g.matmul_nt(w[a], w[bt])?;
            Ok(project(g, y, seed))
        })),
        ("add_mul_scale", Box::new(move |g, w| {
            let s = g.add(w[a], w[c])?;
            let m = g.mul(s, w[a])?;
            let y = g.scale(m, -1.7);
            Ok(project(g, y, seed))
        })),
        ("add_row", Box::new(move |g, w| {
            let y = g.add_row(w[a], w[bias])?;
            Ok(project(g, y, seed))
        })),
        ("relu", Box::new(move |g, w| {
            let y = g.relu(w[a]);
            Ok(project(g, y, seed))
        })),
        ("gelu", Box::new(move |g, w| {
            let y = g.gelu(w[a]);
            Ok(project(g, y, seed))
        })),
        ("softmax", Box::new(move |g, w| {
            let y = g.softmax(w[a], 1)?;
            Ok(project(g, y, seed))
        })),
        ("layer_norm", Box::new(move |g, w| {
            let y = g.layer_norm(w[a], w[gamma], w[beta], 1e-5)?;
            Ok(project(g, y, seed))
        })),
        ("attention", Box::new(move |g, w| {
            let y = g.attention(w[q], w[k], w[v], &mask, batch, seq, heads)?;
            Ok(project(g, y, seed))
        })),
        ("gather_rows", Box::new(move |g, w| {
            let idx: Vec<RowRef> = vec![Some((1, 2)), None, Some((0, 0)), Some((1, 2)), Some((0, 1))];
            let y = g.gather_rows(&[w[a], w[c]], &idx)?;
            Ok(project(g, y, seed))
        })),
        ("masked_mean_pool", Box::new(move |g, w| {
            let y = g.masked_mean_pool(w[bt], &[true, false, true, true, true], 1, 5)?;
            Ok(project(g, y, seed))
        })),
        ("l2_normalize", Box::new(move |g, w| {
            let y = g.l2_normalize_rows(w[a])?;
            Ok(project(g, y, seed))
        })),
        ("mean", Box::new(move |g, w| {
            let m = g.mul(w[a], w[c])?;
            Ok(g.mean(m))
        })),
        ("bce_with_logits", Box::new(move |g, w| {
            g.bce_with_logits(w[a], &[1.0, 0.0, 0.0, 1.0, 1.0, 1.0, 0.0, 0.0, 1.0, 0.0, 1.0, 0.0])
        })),
        ("cross_entropy", Box::new(move |g, w| g.cross_entropy(w[a], &[0, 3, 2], &[true, false, true]))),
    ];
    Ok((p, cases))
}

/// Synthetic corpus sized for the toy model.
pub fn toy_spec(seed: u64) -> SynthSpec {
    SynthSpec {
        n_entities: 4,
        n_images: 6,
        n_queries: 12,
        n_gallery: 4,
        n_gallery_large: 4,
        gallery_queries_per_image: 1,
        d_app: 6,
        n_regions: 4,
        n_candidates: 3,
        facts_per_entity: 2,
        seed,
        ..SynthSpec::default()
    }
}

/// Checks the full training loss (alignment, MLM and linking terms) of a
/// toy model on one batch of a generated corpus in `dir`.
pub fn check_alignment_loss(dir: &Path, seed: u64, objective: Objective, opts: &GradCheckOptions) -> Result<GradCheckReport> {
    let manifest = generate_synthetic(&toy_spec(seed), dir)?;
    let corpus = Corpus::load(&manifest, Some(6))?;
    let config = ModelConfig::toy(corpus.vocab.len());
    let model = Kramt::new(config.clone(), seed)?;
    let tokens = Tokenized::new(&corpus, &config)?;
    let schedule = TrainSchedule {
        knowledge: KnowledgeMode::Selected,
        mlm_prob: 0.5,
        ..TrainSchedule::desk()
    };
    let ctx = TrainContext {
        corpus: &corpus,
        tokens: &tokens,
        schedule: &schedule,
    };
    let pool = PairPool::from_split(&corpus, Split::Train)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let batch = sample_pairs(&pool, &[0, 3, 7], &mut rng, 1);
    let mut prep = prepare_batch(&ctx, &batch, objective, &mut rng)?;
    let chosen = {
        let mut g = Graph::new();
        let p = model.params.bind(&mut g);
        batch_loss(&model, &mut g, &p, &ctx, &prep)?.2
    };
    // Selection is piecewise constant in the parameters; freeze it.
    prep.chosen = Some(chosen);
    let mut params = model.params.clone();
    check_graph(&mut params, |g, p| Ok(batch_loss(&model, g, p, &ctx, &prep)?.0), opts)
}

/// Runs every primitive over `opts.seeds` instances and the full loss once
/// per objective.
pub fn run_suite(opts: &VerifyOptions) -> Result<VerifyReport> {
    let started = Instant::now();
    let gc = GradCheckOptions {
        coords_per_param: opts.coords_per_param,
        ..GradCheckOptions::default()
    };
    let mut cases = Vec::new();
    for seed in 0..opts.seeds {
        let (mut params, builders) = primitive_cases(seed)?;
        for (name, build) in builders {
            let r = check_graph(&mut params, build, &GradCheckOptions { seed, ..gc })?;
            cases.push(CaseReport::new(name, seed, &r));
        }
    }
    let dir = std::env::temp_dir().join(format!(
        "kramt-verify-{}-{}",
        std::process::id(),
        started.elapsed().as_nanos()
    ));
    let full = (|| -> Result<()> {
        for (name, objective) in [("alignment_loss", Objective::Itm), ("pretraining_loss", Objective::ItmMlm)] {
            let r = check_alignment_loss(&dir, 11, objective, &GradCheckOptions { coords_per_param: 4, ..gc })?;
            cases.push(CaseReport::new(name, 11, &r));
        }
        Ok(())
    })();
    let _ = std::fs::remove_dir_all(&dir);
    full?;
    let max_rel_error = cases.iter().map(|c| c.max_rel_error).fold(0.0, f64::max);
    let passed = cases.iter().all(CaseReport::passed);
    Ok(VerifyReport {
        cases,
        max_rel_error,
        tolerance: TOLERANCE,
        passed,
        seconds: started.elapsed().as_secs_f64(),
    })
}
