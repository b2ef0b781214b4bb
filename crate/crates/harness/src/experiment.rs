//! Experiment driver: deterministic per-instance pair construction for each
//! evaluation scenario and the loop that turns a protocol into a recall
//! report.
//!
//! Every instance derives its own stream seed from the run seed, the
//! scenario, the angle bound, and the instance index, so results are
//! identical no matter how the work is split across threads.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::config::{CropMethod, EvalConfig, Stage};
use crate::model::ModelBundle;
use crate::report::{RecallReport, ReportCell};
use crate::HarnessError;
use c2f_core::geometry::{
    apply, crop_halfspace, crop_partial, jitter, random_permutation, recall,
    registration_errors, sample_transform, PerturbationSpec, PointCloud, RegistrationErrors,
    RigidTransform, Scenario,
};
use c2f_core::global_register::register_coarse;
use c2f_core::local_register::register_full;
use c2f_core::shapes::{generate_shape, sample_surface};

// === deterministic seeding ===

/// One round of the splitmix64 mixer.
fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn scenario_tag(scenario: Scenario) -> u64 {
    match scenario {
        Scenario::Clean => 1,
        Scenario::Noisy => 2,
        Scenario::IndependentlySampled => 3,
        Scenario::PartialOverlap => 4,
    }
}

/// Stream seed for one evaluation instance. Mixing each ingredient through
/// splitmix64 keeps neighbouring cells decorrelated even though their inputs
/// differ by one bit.
pub fn instance_seed(base: u64, scenario: Scenario, max_angle_deg: f64, instance: u64) -> u64 {
    let mut h = splitmix64(base);
    h = splitmix64(h ^ scenario_tag(scenario));
    h = splitmix64(h ^ max_angle_deg.to_bits());
    h = splitmix64(h ^ instance);
    h
}

// === instance construction ===

/// One registration problem: a source cloud, a target cloud, and the motion
/// that carries source onto target.
#[derive(Clone, Debug)]
pub struct EvalInstance {
    pub src: PointCloud,
    pub tgt: PointCloud,
    pub motion: RigidTransform,
}

/// Builds one scenario instance from its own seeded stream. The source stays
/// in the shape's canonical frame; the target is moved by the sampled
/// ground-truth motion. What "the same points" means varies by scenario:
/// exact permuted copies (clean), jittered copies (noisy), two independent
/// surface draws (independent), or two independently cropped subsets
/// (partial).
pub fn build_instance(
    scenario: Scenario,
    max_angle_deg: f64,
    max_translation: f64,
    points: usize,
    keep_ratio: f64,
    crop: CropMethod,
    seed: u64,
) -> Result<EvalInstance, HarnessError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = generate_shape(&mut rng)?;
    let base = sample_surface(&shape, points, &mut rng)?;
    let spec = PerturbationSpec { max_angle_deg, max_translation, scenario, seed };
    let motion = sample_transform(&spec, &mut rng);
    let perm = random_permutation(base.len(), &mut rng);

    let (src, canon_tgt) = match scenario {
        Scenario::Clean => (base.permuted(&perm)?, base),
        Scenario::Noisy => {
            let src = jitter(&base.permuted(&perm)?, &mut rng);
            let tgt = jitter(&base, &mut rng);
            (src, tgt)
        }
        Scenario::IndependentlySampled => {
            let other = sample_surface(&shape, points, &mut rng)?;
            (other, base)
        }
        Scenario::PartialOverlap => {
            let cropper = |p: &PointCloud, rng: &mut ChaCha8Rng| match crop {
                CropMethod::Fps => crop_partial(p, keep_ratio, rng),
                CropMethod::Halfspace => crop_halfspace(p, keep_ratio, rng),
            };
            let src = cropper(&base.permuted(&perm)?, &mut rng)?;
            let tgt = cropper(&base, &mut rng)?;
            (src, tgt)
        }
    };
    Ok(EvalInstance { src, tgt: apply(&canon_tgt, &motion), motion })
}

// === evaluation loop ===

fn run_instance(
    model: &ModelBundle,
    config: &EvalConfig,
    max_angle_deg: f64,
    instance: u64,
) -> Result<RegistrationErrors, HarnessError> {
    let seed = instance_seed(config.seed, config.scenario, max_angle_deg, instance);
    let pair = build_instance(
        config.scenario,
        max_angle_deg,
        config.max_translation,
        config.points_per_cloud,
        config.keep_ratio,
        config.crop,
        seed,
    )?;
    let estimate = match config.stage {
        Stage::Coarse => {
            register_coarse(&model.extractor, &pair.src, &pair.tgt)?.transform
        }
        Stage::Full => {
            register_full(
                &model.extractor,
                model.scorer.as_ref(),
                model.matcher.as_ref(),
                &pair.src,
                &pair.tgt,
                config.refine_iterations,
            )?
            .refined
        }
    };
    Ok(registration_errors(&pair.motion, &estimate))
}

fn median(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

fn eval_cell(
    model: &ModelBundle,
    config: &EvalConfig,
    max_angle_deg: f64,
) -> Result<ReportCell, HarnessError> {
    let started = Instant::now();
    let errors: Vec<RegistrationErrors> = (0..config.instances as u64)
        .into_par_iter()
        .map(|i| run_instance(model, config, max_angle_deg, i))
        .collect::<Result<_, _>>()?;
    let seconds = started.elapsed().as_secs_f64();

    let mut rot: Vec<f64> = errors.iter().map(|e| e.rot_err_deg).collect();
    let mut trans: Vec<f64> = errors.iter().map(|e| e.trans_err).collect();
    rot.sort_by(f64::total_cmp);
    trans.sort_by(f64::total_cmp);
    Ok(ReportCell {
        max_angle_deg,
        recall: recall(&errors)?,
        median_rot_err_deg: median(&rot),
        median_trans_err: median(&trans),
        instances: errors.len(),
        seconds_per_instance: seconds / errors.len() as f64,
    })
}

/// Runs the full protocol: one report cell per angle bound. With
/// `config.threads > 0` the work runs on a dedicated pool of that size;
/// otherwise it uses the process-wide default. The numbers in the report do
/// not depend on the thread count.
pub fn run_eval(model: &ModelBundle, config: &EvalConfig) -> Result<RecallReport, HarnessError> {
    config.validate()?;
    let cells = if config.threads > 0 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(config.threads)
            .build()
            .map_err(|e| HarnessError::Config(format!("thread pool: {e}")))?;
        pool.install(|| -> Result<Vec<ReportCell>, HarnessError> {
            config.angle_ranges.iter().map(|&a| eval_cell(model, config, a)).collect()
        })?
    } else {
        config
            .angle_ranges
            .iter()
            .map(|&a| eval_cell(model, config, a))
            .collect::<Result<Vec<_>, _>>()?
    };
    Ok(RecallReport {
        scenario: config.scenario.as_str().to_string(),
        stage: config.stage.as_str().to_string(),
        points_per_cloud: config.points_per_cloud,
        seed: config.seed,
        cells,
    })
}
