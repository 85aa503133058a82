//! Synthetic ranking workload with a planted routing signal.
//!
//! Each instance draws a latent ambiguity `a ~ U(0, 1)`. Ambiguity shapes
//! the embeddings (the target drifts away from the context while negatives
//! crowd around it), the checklist answers, the Non-Think rank of the single
//! relevant candidate and the token counts. A noisy copy of `a` assigns the
//! instance to a population in which Think improves, worsens or barely moves
//! the target's rank.

use std::collections::BTreeMap;

use anyhow::{bail, Result};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Normal, StandardNormal};
use reasonroute_core::features::EmbeddingDump;
use reasonroute_core::probe::{extract_yes_no, ChecklistQuestion, Direction, ProbeResult};
use reasonroute_core::ranking::{Candidate, DualModeRecord, ModeOutcome, RankedList, RankingInstance, Task};
use reasonroute_core::Execution;
use reasonroute_gateway::parse::estimate_tokens;
use reasonroute_gateway::render_prompt;
use serde::{Deserialize, Serialize};

pub const SYNTH_TRUTH_KIND: &str = "synth-truth";

const VOCAB: [&str; 24] = [
    "river", "engine", "market", "signal", "garden", "theory", "harbor", "ledger", "canvas", "orbit", "protein",
    "archive", "voltage", "meadow", "cipher", "tariff", "glacier", "lantern", "syntax", "quarry", "vessel", "pollen",
    "beacon", "thermal",
];

const N_CLUSTERS: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_instances: usize,
    pub n_candidates: usize,
    pub dim: usize,
    /// Share of recommendation-style instances (history instead of query).
    pub rec_fraction: f64,
    /// Noisy ambiguity above this value: Think helps.
    pub helps_above: f64,
    /// Noisy ambiguity below this value: Think hurts.
    pub hurts_below: f64,
    /// Std of the noise added to ambiguity before population assignment.
    pub assign_noise: f64,
    /// Probability that the two modes' outcomes are swapped.
    pub swap_noise: f64,
    /// Std of the logit noise on checklist answers.
    pub probe_noise: f64,
    /// Also log a self-selected run per instance.
    pub self_select: bool,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_instances: 2000,
            n_candidates: 50,
            dim: 16,
            rec_fraction: 0.25,
            helps_above: 0.65,
            hurts_below: 0.35,
            assign_noise: 0.08,
            swap_noise: 0.1,
            probe_noise: 0.8,
            self_select: true,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_instances < 2 {
            bail!("synth.n_instances must be >= 2, got {}", self.n_instances);
        }
        if self.n_candidates < 2 {
            bail!("synth.n_candidates must be >= 2, got {}", self.n_candidates);
        }
        if self.dim < 2 {
            bail!("synth.dim must be >= 2, got {}", self.dim);
        }
        if self.hurts_below > self.helps_above {
            bail!("synth.hurts_below must not exceed synth.helps_above");
        }
        for (name, p) in [("rec_fraction", self.rec_fraction), ("swap_noise", self.swap_noise)] {
            if !(0.0..=1.0).contains(&p) {
                bail!("synth.{name} must lie in [0, 1], got {p}");
            }
        }
        if !(self.assign_noise >= 0.0 && self.probe_noise >= 0.0) {
            bail!("synth noise scales must be >= 0");
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Population {
    ThinkHelps,
    ThinkHurts,
    Neutral,
}

/// Generator-side ground truth, kept for diagnostics and tests.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthTruth {
    pub instance_id: String,
    pub population: Population,
    pub ambiguity: f64,
    pub rank_non_think: usize,
    pub rank_think: usize,
    pub swapped: bool,
}

#[derive(Clone, Debug, Default)]
pub struct SynthData {
    pub instances: Vec<RankingInstance>,
    pub embeddings: Vec<EmbeddingDump>,
    pub records: Vec<DualModeRecord>,
    pub probes: Vec<ProbeResult>,
    pub truth: Vec<SynthTruth>,
}

struct One {
    instance: RankingInstance,
    dump: EmbeddingDump,
    record: DualModeRecord,
    probe: ProbeResult,
    truth: SynthTruth,
}

pub fn generate(cfg: &SynthConfig, seed: u64, checklist: &[ChecklistQuestion], exec: Execution) -> Result<SynthData> {
    cfg.validate()?;
    let items = exec.map_range(cfg.n_instances, |i| generate_one(cfg, seed, checklist, i));
    let mut out = SynthData::default();
    for one in items {
        let one = one?;
        out.instances.push(one.instance);
        out.embeddings.push(one.dump);
        out.records.push(one.record);
        out.probes.push(one.probe);
        out.truth.push(one.truth);
    }
    Ok(out)
}

fn gaussian(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| StandardNormal.sample(rng)).collect()
}

fn unit(v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    v.into_iter().map(|x| x / n).collect()
}

/// `sum_k w_k * v_k`, then L2-normalised.
fn mix(parts: &[(f64, &[f64])]) -> Vec<f64> {
    let dim = parts[0].1.len();
    let mut out = vec![0.0; dim];
    for (w, v) in parts {
        for (o, x) in out.iter_mut().zip(v.iter()) {
            *o += w * x;
        }
    }
    unit(out)
}

fn words(rng: &mut ChaCha8Rng, n: usize) -> String {
    (0..n).map(|_| *VOCAB.choose(rng).expect("non-empty")).collect::<Vec<_>>().join(" ")
}

/// Order with the target at 1-based `rank` and the negatives shuffled.
fn ranking_with_target(rng: &mut ChaCha8Rng, negatives: &[String], target: &str, rank: usize) -> Vec<String> {
    let mut order = negatives.to_vec();
    order.shuffle(rng);
    order.insert(rank - 1, target.to_string());
    order
}

fn generate_one(cfg: &SynthConfig, seed: u64, checklist: &[ChecklistQuestion], index: usize) -> Result<One> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    let n = cfg.n_candidates;
    let dim = cfg.dim;

    let a: f64 = rng.random();
    let noisy = a + cfg.assign_noise * rng.sample::<f64, _>(StandardNormal);
    let population = if noisy > cfg.helps_above {
        Population::ThinkHelps
    } else if noisy < cfg.hurts_below {
        Population::ThinkHurts
    } else {
        Population::Neutral
    };

    let id = format!("q{index:05}");
    let task = if rng.random::<f64>() < cfg.rec_fraction { Task::Rec } else { Task::Ir };
    let target_idx = rng.random_range(0..n);
    let item_ids: Vec<String> = (0..n).map(|j| format!("{id}-c{j:02}")).collect();
    let text_len = rng.random_range(4..=20);
    let candidates: Vec<Candidate> = item_ids
        .iter()
        .map(|item_id| Candidate {
            item_id: item_id.clone(),
            text: words(&mut rng, text_len),
        })
        .collect();

    // Embeddings: the context direction `u`; negatives mix `u` with a few
    // cluster centres and tighten around `u` as ambiguity grows.
    let u = unit(gaussian(&mut rng, dim));
    let centres: Vec<Vec<f64>> = (0..N_CLUSTERS).map(|_| unit(gaussian(&mut rng, dim))).collect();
    let mut vectors = Vec::with_capacity(n);
    for j in 0..n {
        let z = unit(gaussian(&mut rng, dim));
        let v = if j == target_idx {
            mix(&[(1.6 - 1.2 * a, &u), (0.6, &z)])
        } else {
            let c = &centres[j % N_CLUSTERS];
            mix(&[(0.2 + 1.0 * a, &u), (1.0 - 0.6 * a, c), (0.5 - 0.3 * a, &z)])
        };
        vectors.push(v);
    }
    let (context, history, ctx_vec, hist_vecs) = match task {
        Task::Ir => {
            let z = unit(gaussian(&mut rng, dim));
            let q = mix(&[(1.0, &u), (0.2, &z)]);
            let len = rng.random_range(6..=12);
            (Some(words(&mut rng, len)), None, Some(q), None)
        }
        Task::Rec => {
            let len = rng.random_range(3..=8);
            let mut texts = Vec::with_capacity(len);
            let mut vecs = Vec::with_capacity(len);
            for _ in 0..len {
                let z = unit(gaussian(&mut rng, dim));
                vecs.push(mix(&[(1.0, &u), (0.3 + 0.8 * a, &z)]));
                texts.push(words(&mut rng, 3));
            }
            (None, Some(texts), None, Some(vecs))
        }
    };

    let instance = RankingInstance {
        id: id.clone(),
        task,
        context,
        history,
        candidates,
        qrels: BTreeMap::from([(item_ids[target_idx].clone(), 1)]),
        k: n.min(10),
    };
    instance.validate()?;
    let prompt_tokens = estimate_tokens(&render_prompt(&instance));
    let dump = EmbeddingDump {
        instance_id: id.clone(),
        dim,
        context: ctx_vec,
        history: hist_vecs,
        candidates: vectors,
        prompt_tokens,
    };

    // Ranks of the relevant candidate under each mode.
    let exp = Exp::new(1.0 / (0.3 + 12.0 * a)).expect("positive rate");
    let draw: f64 = exp.sample(&mut rng);
    let r_non = (1 + draw.floor() as usize).min(n);
    let r_think = match population {
        Population::ThinkHelps => ((r_non as f64 * rng.random_range(0.1..0.4)).round() as usize).clamp(1, n),
        Population::ThinkHurts => {
            let worse: f64 = Exp::new(1.0 / 3.0).expect("positive rate").sample(&mut rng);
            let worse = worse.floor() as usize;
            (r_non + 1 + worse).min(n)
        }
        Population::Neutral => (r_non as i64 + rng.random_range(-1..=1)).clamp(1, n as i64) as usize,
    };
    let swapped = rng.random::<f64>() < cfg.swap_noise;
    let (r_non, r_think) = if swapped { (r_think, r_non) } else { (r_non, r_think) };

    let target = &item_ids[target_idx];
    let negatives: Vec<String> = item_ids.iter().filter(|i| *i != target).cloned().collect();
    let order_non = ranking_with_target(&mut rng, &negatives, target, r_non);
    let order_think = ranking_with_target(&mut rng, &negatives, target, r_think);

    let pt = prompt_tokens as f64;
    let t_non = (30.0 + 0.03 * pt + rng.random_range(0.0..25.0)).round() as u64;
    let think_noise: f64 = Normal::new(0.0, 25.0).expect("finite std").sample(&mut rng);
    let t_think = ((80.0 + 0.35 * pt + 80.0 * a + think_noise).round() as u64).max(t_non + 10);

    let non_think = ModeOutcome::new(RankedList::new(id.clone(), order_non), t_non);
    let think = ModeOutcome::new(RankedList::new(id.clone(), order_think), t_think);
    let self_select = cfg.self_select.then(|| {
        let p_think = 1.0 / (1.0 + (-4.0 * (a - 0.5)).exp());
        let mut chosen = if rng.random::<f64>() < p_think {
            let mut o = think.clone();
            o.raw_text = Some("<thought>(synthetic reasoning)</thought><output>(synthetic ranking)</output>".into());
            o
        } else {
            let mut o = non_think.clone();
            o.raw_text = Some("<output>(synthetic ranking)</output>".into());
            o
        };
        chosen.tokens += 5;
        chosen
    });
    let record = DualModeRecord {
        instance_id: id.clone(),
        non_think,
        think,
        self_select,
    };

    let probe_noise = Normal::new(0.0, cfg.probe_noise).expect("finite std");
    let mut p_yes = BTreeMap::new();
    for q in checklist {
        let sign = match q.direction {
            Direction::FavorsThink => 1.0,
            Direction::FavorsNonThink => -1.0,
        };
        let logit = 4.0 * sign * (a - 0.5) + probe_noise.sample(&mut rng);
        p_yes.insert(q.qid.clone(), extract_yes_no(logit, 0.0)?);
    }
    let probe = ProbeResult {
        instance_id: id.clone(),
        p_yes,
        flags: BTreeMap::new(),
    };

    Ok(One {
        instance,
        dump,
        record,
        probe,
        truth: SynthTruth {
            instance_id: id,
            population,
            ambiguity: a,
            rank_non_think: r_non,
            rank_think: r_think,
            swapped,
        },
    })
}
