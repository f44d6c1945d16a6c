//! Plan execution: embed every (key, image, scheme) mark, gate on pre-attack
//! verification, then attack the surviving marks at every budget.

use std::time::Instant;

use log::{info, warn};
use rayon::prelude::*;

use super::corpus::{ingest_corpus, synthetic_corpus};
use super::plan::{AttackKind, CorpusSource, ExperimentPlan, Scheme};
use super::report::{AttackRow, MarkRecord};
use crate::attacks::{copy_attack, removal_targeted, removal_untargeted, select_target};
use crate::embed::{embed_multibit, embed_zero_bit, EmbedConfig};
use crate::error::Result;
use crate::features::FeatureExtractor;
use crate::percept::{psnr, ImagePlane};
use crate::rng;
use crate::wmcodec::{
    bit_error_rate, decode_multibit, detect_zero_bit, generate_carriers, ConeDetector, Message,
    SecretKey,
};

/// Stream tags keep the per-pair seeds of different purposes apart.
const EMBED_STREAM: u64 = 1;
const MESSAGE_STREAM: u64 = 2;
const TARGET_STREAM: u64 = 3;

/// What a mark encodes and how it is verified.
#[derive(Clone, Debug)]
enum Payload {
    ZeroBit { pfa: f64 },
    MultiBit { message: Message },
}

/// One watermarked image.
struct Mark {
    key_index: usize,
    image_index: usize,
    variant: usize,
    payload: Payload,
    xw: ImagePlane,
    record: MarkRecord,
}

/// Everything a run produces.
#[derive(Clone, Debug, Default)]
pub struct PlanOutcome {
    pub marks: Vec<MarkRecord>,
    pub rows: Vec<AttackRow>,
}

impl PlanOutcome {
    /// Marks that failed pre-attack verification; their attacks are skipped.
    pub fn gate_failures(&self) -> usize {
        self.marks.iter().filter(|m| !m.passed).count()
    }
}

fn load_corpus(plan: &ExperimentPlan) -> Result<Vec<(String, ImagePlane)>> {
    match &plan.corpus {
        CorpusSource::Synthetic { seed } => {
            Ok(synthetic_corpus(*seed, plan.image_count, plan.image_size))
        }
        CorpusSource::Directory(dir) => {
            ingest_corpus(dir, plan.image_count, plan.image_size as u32)
        }
    }
}

fn pair_seed(plan: &ExperimentPlan, key_index: usize, image_index: usize) -> u64 {
    rng::derive_seed(&[plan.master_seed, key_index as u64, image_index as u64])
}

fn variants(plan: &ExperimentPlan) -> Vec<(Scheme, f64, usize)> {
    let mut out = Vec::new();
    for &s in &plan.schemes {
        match s {
            Scheme::ZeroBit => out.extend(plan.pfa_targets.iter().map(|&p| (s, p, 0))),
            Scheme::MultiBit => out.extend(plan.payloads.iter().map(|&l| (s, 0.0, l))),
        }
    }
    out
}

/// Detection and BER of `z` for a mark. Multi-bit marks count as detected
/// only when every bit decodes correctly.
fn verify(
    payload: &Payload,
    key: SecretKey,
    extractor: &dyn FeatureExtractor,
    x: &ImagePlane,
) -> Result<(bool, Option<f64>)> {
    let z = extractor.forward(x)?;
    let d = extractor.latent_dim();
    match payload {
        Payload::ZeroBit { pfa } => {
            let det = ConeDetector::from_key(key, d, *pfa)?;
            Ok((detect_zero_bit(&z, &det)?, None))
        }
        Payload::MultiBit { message } => {
            let carriers = generate_carriers(key, message.len(), d)?;
            let ber = bit_error_rate(message, &decode_multibit(&z, &carriers)?)?;
            Ok((ber == 0.0, Some(ber)))
        }
    }
}

fn elapsed_ms(plan: &ExperimentPlan, start: Instant) -> u64 {
    if plan.record_wall_time {
        start.elapsed().as_millis() as u64
    } else {
        0
    }
}

#[allow(clippy::too_many_arguments)]
fn make_mark(
    plan: &ExperimentPlan,
    extractor: &dyn FeatureExtractor,
    corpus: &[(String, ImagePlane)],
    key_index: usize,
    image_index: usize,
    variant: usize,
    (scheme, pfa, payload_len): (Scheme, f64, usize),
) -> Result<Mark> {
    let start = Instant::now();
    let key_seed = plan.key_seeds[key_index];
    let key = SecretKey::new(key_seed);
    let seed = pair_seed(plan, key_index, image_index);
    let (name, x0) = &corpus[image_index];
    let cfg = EmbedConfig {
        seed: rng::derive_seed(&[seed, EMBED_STREAM, variant as u64]),
        ..plan.embed.clone()
    };
    let (payload, xw) = match scheme {
        Scheme::ZeroBit => (
            Payload::ZeroBit { pfa },
            embed_zero_bit(x0, key, pfa, extractor, &cfg)?,
        ),
        Scheme::MultiBit => {
            let mut r = rng::stream(rng::derive_seed(&[seed, MESSAGE_STREAM, variant as u64]));
            let message = Message::random(payload_len, &mut r)?;
            let xw = embed_multibit(x0, key, &message, extractor, &cfg)?;
            (Payload::MultiBit { message }, xw)
        }
    };
    let (detected, ber) = verify(&payload, key, extractor, &xw)?;
    let record = MarkRecord {
        experiment_id: plan.experiment_id.clone(),
        key_seed,
        image_id: name.clone(),
        scheme,
        pfa_target: matches!(scheme, Scheme::ZeroBit).then_some(pfa),
        payload: matches!(scheme, Scheme::MultiBit).then_some(payload_len),
        achieved_psnr_w: psnr(x0, &xw)?,
        detected,
        ber,
        passed: detected,
        wall_time_ms: elapsed_ms(plan, start),
    };
    Ok(Mark {
        key_index,
        image_index,
        variant,
        payload,
        xw,
        record,
    })
}

fn attack_mark(
    plan: &ExperimentPlan,
    extractor: &dyn FeatureExtractor,
    corpus: &[(String, ImagePlane)],
    mark: &Mark,
    (attack_index, attack): (usize, AttackKind),
    (budget_index, target_psnr): (usize, f64),
) -> Result<AttackRow> {
    let start = Instant::now();
    let cfg = plan.attack.clone().at_budget(target_psnr)?;
    let key = SecretKey::new(mark.record.key_seed);
    let n = corpus.len();
    let (xa, reference) = match attack {
        AttackKind::Copy => {
            // Each watermarked image is paired with its cyclic successor.
            let xt = &corpus[(mark.image_index + 1) % n].1;
            (copy_attack(&mark.xw, xt, extractor, &cfg)?, xt)
        }
        AttackKind::RemovalUntargeted => (removal_untargeted(&mark.xw, extractor, &cfg)?, &mark.xw),
        AttackKind::RemovalTargeted(strategy) => {
            let others: Vec<ImagePlane> = corpus
                .iter()
                .enumerate()
                .filter(|(i, _)| *i != mark.image_index)
                .map(|(_, (_, x))| x.clone())
                .collect();
            let seed = rng::derive_seed(&[
                pair_seed(plan, mark.key_index, mark.image_index),
                TARGET_STREAM,
                mark.variant as u64,
                attack_index as u64,
                budget_index as u64,
            ]);
            let target = select_target(
                strategy,
                &mark.xw,
                &others,
                extractor,
                &mut rng::stream(seed),
            )?;
            (
                removal_targeted(&mark.xw, &target, extractor, &cfg)?,
                &mark.xw,
            )
        }
    };
    let (detected, ber) = verify(&mark.payload, key, extractor, &xa)?;
    Ok(AttackRow {
        experiment_id: plan.experiment_id.clone(),
        key_seed: mark.record.key_seed,
        image_id: mark.record.image_id.clone(),
        scheme: mark.record.scheme,
        attack_kind: attack.name().to_string(),
        target_strategy: attack.strategy_name().to_string(),
        target_psnr_a: target_psnr,
        achieved_psnr_a: psnr(reference, &xa)?,
        achieved_psnr_w: mark.record.achieved_psnr_w,
        detected,
        ber,
        pfa_target: mark.record.pfa_target,
        payload: mark.record.payload,
        iterations: cfg.plan.iterations,
        lambda: cfg.plan.lambda,
        eta: cfg.plan.learning_rate,
        wall_time_ms: elapsed_ms(plan, start),
    })
}

/// Runs `plan` with `extractor`, handing each attack row to `on_row` in a
/// deterministic order as soon as its chunk completes.
pub fn run_plan_with(
    plan: &ExperimentPlan,
    extractor: &dyn FeatureExtractor,
    on_row: &mut dyn FnMut(&AttackRow) -> Result<()>,
) -> Result<PlanOutcome> {
    plan.validate()?;
    let corpus = load_corpus(plan)?;
    let variants = variants(plan);
    info!(
        "{}: {} images, {} keys, {} mark variants",
        plan.experiment_id,
        corpus.len(),
        plan.key_seeds.len(),
        variants.len()
    );

    let (n_images, n_variants) = (corpus.len(), variants.len());
    let mark_jobs: Vec<(usize, usize, usize)> = (0..plan.key_seeds.len())
        .flat_map(|k| (0..n_images).flat_map(move |i| (0..n_variants).map(move |v| (k, i, v))))
        .collect();
    let marks = mark_jobs
        .par_iter()
        .map(|&(k, i, v)| make_mark(plan, extractor, &corpus, k, i, v, variants[v]))
        .collect::<Result<Vec<_>>>()?;
    for m in marks.iter().filter(|m| !m.record.passed) {
        warn!(
            "pre-attack verification failed: key {} image {} {}; excluded from attacks",
            m.record.key_seed, m.record.image_id, m.record.scheme
        );
    }

    let attack_jobs: Vec<(usize, usize, usize)> = marks
        .iter()
        .enumerate()
        .filter(|(_, m)| m.record.passed)
        .flat_map(|(m, _)| {
            (0..plan.attacks.len())
                .flat_map(move |a| (0..plan.psnr_a_targets.len()).map(move |b| (m, a, b)))
        })
        .collect();
    let chunk = 4 * rayon::current_num_threads();
    let mut rows = Vec::with_capacity(attack_jobs.len());
    for jobs in attack_jobs.chunks(chunk) {
        let done = jobs
            .par_iter()
            .map(|&(m, a, b)| {
                attack_mark(
                    plan,
                    extractor,
                    &corpus,
                    &marks[m],
                    (a, plan.attacks[a]),
                    (b, plan.psnr_a_targets[b]),
                )
            })
            .collect::<Result<Vec<_>>>()?;
        for row in done {
            on_row(&row)?;
            rows.push(row);
        }
    }
    Ok(PlanOutcome {
        marks: marks.into_iter().map(|m| m.record).collect(),
        rows,
    })
}

/// Builds the plan's extractor and runs it, collecting all rows.
pub fn run_plan(plan: &ExperimentPlan) -> Result<PlanOutcome> {
    plan.validate()?;
    let extractor = plan
        .extractor
        .spec(plan.image_size, plan.image_size)?
        .build()?;
    run_plan_with(plan, extractor.as_ref(), &mut |_| Ok(()))
}
