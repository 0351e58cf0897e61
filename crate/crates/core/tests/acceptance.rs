//! One PASS/FAIL line per acceptance criterion.
//!
//! Criteria 1 to 5 are hard requirements and fail the test. Criteria 6 to 8
//! measure protection orderings on the default-configuration grid and are
//! reported without failing the build, since they are empirical outcomes of
//! the toy models rather than correctness properties.

mod common;

use std::time::Instant;

use common::*;
use idcloak::cloak::{apply_cloak_latent, cloak_objective, optimize_cloak, CloakOptConfig};
use idcloak::diffusion::{make_schedule, Denoiser, MlpDenoiser};
use idcloak::identity::{diversify_contexts, DiversifyConfig};
use idcloak::threat::{attack_and_evaluate, craft_defense, Defense, MetricsReport};
use idcloak::workbench::experiment::{attacker_kit, defender_kit};
use idcloak::workbench::{build_world, prepare_defender, synth_dataset, ExperimentConfig, PIXEL_RANGE};
use idcloak::{RngState, Tensor};

const GRID_SEEDS: [u64; 3] = [0, 1, 2];
const GRID_IDENTITIES: u64 = 5;
/// Widths of the second attacker architecture.
const ALT_WIDTHS: [usize; 2] = [192, 128];

fn verdict(n: usize, ok: bool, detail: String) -> bool {
    println!("criterion {n}: {} | {detail}", if ok { "PASS" } else { "FAIL" });
    ok
}

fn zero_cloak_objective_worst(trials: u64) -> f64 {
    let s = sched(100);
    let mut worst: f64 = 0.0;
    for seed in 0..trials {
        let m = tiny_model(seed);
        let mut r = RngState::new(seed);
        let x_t = Tensor::vector(r.gaussian_vec(16));
        let c = Tensor::vector(r.gaussian_vec(6));
        let t = r.int_inclusive(1, 100);
        let eps = Tensor::vector(m.predict(x_t.data(), t, c.data()));
        let same = apply_cloak_latent(&x_t, t, &eps, &Tensor::zeros(vec![16]), &s).unwrap();
        worst = worst.max(cloak_objective(&m, &x_t, &same, t, &c).unwrap().0.abs());
    }
    worst
}

fn algebraic() -> bool {
    let clock = Instant::now();
    let (round, linear) = algebra_worst(500);
    let zero = zero_cloak_objective_worst(50);
    let secs = clock.elapsed().as_secs_f64();
    let ok = round <= 1e-10 && linear <= 1e-12 && zero == 0.0 && secs < 10.0;
    verdict(
        1,
        ok,
        format!("round trip {round:.1e}, latent cloak {linear:.1e}, zero cloak {zero}, {secs:.1}s"),
    )
}

fn gradients() -> bool {
    let clock = Instant::now();
    let mut worst = [0.0f64; 5];
    for seed in FD_SEEDS {
        let d = denoise_loss_fd(seed);
        for k in 0..3 {
            worst[k] = worst[k].max(d[k]);
        }
        worst[3] = worst[3].max(anchor_fd(seed));
        worst[4] = worst[4].max(cloak_fd(seed));
    }
    let secs = clock.elapsed().as_secs_f64();
    let ok = worst.iter().all(|&w| w < FD_TOL) && secs < 60.0;
    verdict(
        2,
        ok,
        format!(
            "worst rel err theta {:.1e}, x_t {:.1e}, c {:.1e}, anchor {:.1e}, cloak {:.1e}; {} coords x {} seeds, {secs:.1}s",
            worst[0],
            worst[1],
            worst[2],
            worst[3],
            worst[4],
            FD_COORDS,
            FD_SEEDS.len()
        ),
    )
}

fn reductions() -> bool {
    let single = (0..5).filter(|&s| single_sample_reduction_holds(s)).count();
    let avg = (0..5).filter(|&s| gradient_average_reduction_holds(s)).count();
    verdict(
        3,
        single == 5 && avg == 5,
        format!("single-sample loop bit-exact {single}/5, one-image average bit-exact {avg}/5"),
    )
}

fn smoke_csv(dir: &std::path::Path) -> Vec<u8> {
    let mut cfg = ExperimentConfig::smoke();
    cfg.output_dir = dir.to_path_buf();
    let root = idcloak::workbench::pipeline::run_pipeline(&cfg).unwrap();
    std::fs::read(root.join("reports/metrics.csv")).unwrap()
}

fn budget_and_determinism() -> bool {
    let cfg = ExperimentConfig::default();
    let model = MlpDenoiser::new(cfg.architecture(), &mut RngState::new(7)).unwrap();
    let sched = make_schedule(cfg.t_max, cfg.schedule_kind).unwrap();
    let q = spread_subspace(cfg.cond_dim, 7);
    let cloak_cfg = CloakOptConfig {
        record_iterates: true,
        ..cfg.cloak_config()
    };
    let run = optimize_cloak(&model, &q, &cfg.image_shape(), &cloak_cfg, &sched).unwrap();
    let eta = 16.0 / 255.0;
    let worst = run
        .iterates
        .iter()
        .flatten()
        .chain(run.cloak.delta.data())
        .fold(0.0f64, |m, v| m.max(v.abs()));
    let inner_ok = run.inner_linf.iter().all(|&v| v <= eta);
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let (csv_a, csv_b) = (smoke_csv(a.path()), smoke_csv(b.path()));
    let same = !csv_a.is_empty() && csv_a == csv_b;
    verdict(
        4,
        worst <= eta && inner_ok && same,
        format!(
            "max |delta| {worst:.6} over {} iterates (budget {eta:.6}); identical pipeline CSVs: {same}",
            run.iterates.len()
        ),
    )
}

fn subspace() -> bool {
    let est = subspace_oracle_worst(200);
    let s = sched(100);
    let model = tiny_model(3);
    let c_id = Tensor::vector(RngState::new(3).gaussian_vec(6));
    let images: Vec<Tensor> = (0..4)
        .map(|k| Tensor::vector(RngState::new(k).gaussian_vec(16)))
        .collect();
    let idle = DiversifyConfig {
        steps: 0,
        lr: 1e-3,
        batch: 1,
    };
    let set = diversify_contexts(&images, &model, &c_id, &idle, &s, &RngState::new(1)).unwrap();
    let exact = set.anchors.iter().all(|a| a.as_slice() == c_id.data());
    let z = condition_moment_z(&spread_subspace(6, 11), 100_000, 5);
    verdict(
        5,
        est <= 1e-12 && exact && z < 3.0,
        format!("estimator rel err {est:.1e}; M=0 anchors exact: {exact}; worst moment deviation {z:.2} SE"),
    )
}

/// Held-out metrics for one identity under one seed.
struct Arm {
    clean: MetricsReport,
    image_specific: MetricsReport,
    grad_avg: MetricsReport,
    id_cloak: MetricsReport,
    single_point: MetricsReport,
    alt_clean: MetricsReport,
    alt_id_cloak: MetricsReport,
}

fn grid_config(seed: u64) -> ExperimentConfig {
    ExperimentConfig {
        seed,
        attack_hidden: ALT_WIDTHS.to_vec(),
        ..ExperimentConfig::default()
    }
}

fn run_grid() -> Vec<Arm> {
    let mut arms = Vec::new();
    for seed in GRID_SEEDS {
        let cfg = grid_config(seed);
        let ids: Vec<u64> = (0..GRID_IDENTITIES).map(|i| cfg.identity_seed + i).collect();
        let world = build_world(&cfg, &ids, &[]).unwrap();
        let alt = world
            .alt_base
            .as_ref()
            .expect("distinct attacker widths give a second base");
        let attacker = attacker_kit(&world, &world.base_model, &cfg).unwrap();
        let alt_attacker = attacker_kit(&world, alt, &cfg).unwrap();
        for &id in &ids {
            let clock = Instant::now();
            let ds = synth_dataset(id, cfg.image_size, cfg.n_train, cfg.n_test, cfg.context_spread).unwrap();
            let kit = defender_kit(&prepare_defender(&world, &ds.train, &cfg).unwrap(), &cfg);
            let held_out = |d: Defense, who| {
                let p = craft_defense(&kit, &ds.train, &ds.test, d, PIXEL_RANGE, &world.sched).unwrap();
                MetricsReport::mean_of(&attack_and_evaluate(&p.test, &ds.test, who, &world.sched, 1).unwrap()).unwrap()
            };
            let arm = Arm {
                clean: held_out(Defense::None, &attacker),
                image_specific: held_out(Defense::ImageSpecificTransfer, &attacker),
                grad_avg: held_out(Defense::GradientAvgUniversal, &attacker),
                id_cloak: held_out(Defense::IdCloak, &attacker),
                single_point: held_out(Defense::IdCloakSinglePoint, &attacker),
                alt_clean: held_out(Defense::None, &alt_attacker),
                alt_id_cloak: held_out(Defense::IdCloak, &alt_attacker),
            };
            println!(
                "  seed {seed} identity {id}: ism clean {:.4} img-specific {:.4} grad-avg {:.4} id-cloak {:.4} single-point {:.4} | alt clean {:.4} alt id-cloak {:.4} ({:.0}s)",
                arm.clean.ism_proxy,
                arm.image_specific.ism_proxy,
                arm.grad_avg.ism_proxy,
                arm.id_cloak.ism_proxy,
                arm.single_point.ism_proxy,
                arm.alt_clean.ism_proxy,
                arm.alt_id_cloak.ism_proxy,
                clock.elapsed().as_secs_f64()
            );
            arms.push(arm);
        }
    }
    arms
}

fn protection_ordering(arms: &[Arm]) -> bool {
    let n = arms.len();
    let a = arms
        .iter()
        .filter(|x| x.id_cloak.ism_proxy <= 0.8 * x.clean.ism_proxy)
        .count();
    let b = arms
        .iter()
        .filter(|x| x.id_cloak.ism_proxy < x.image_specific.ism_proxy)
        .count();
    let c = arms
        .iter()
        .filter(|x| x.id_cloak.ism_proxy <= x.grad_avg.ism_proxy)
        .count();
    let need = (n * 13).div_ceil(15);
    let mean_drop = arms
        .iter()
        .map(|x| 1.0 - x.id_cloak.ism_proxy / x.clean.ism_proxy)
        .sum::<f64>()
        / n as f64;
    verdict(
        6,
        a >= need && b >= need && c >= need,
        format!(
            "arms with >=20% ISM drop {a}/{n}, below image-specific {b}/{n}, not above gradient-average {c}/{n} (need {need}); mean relative drop {:.1}%",
            100.0 * mean_drop
        ),
    )
}

/// Grid means of (ISM, FDFR, quality distance).
fn means(arms: &[Arm], pick: impl Fn(&Arm) -> &MetricsReport) -> [f64; 3] {
    let n = arms.len() as f64;
    let mut m = [0.0; 3];
    for a in arms {
        let r = pick(a);
        m[0] += r.ism_proxy / n;
        m[1] += r.fdfr_proxy / n;
        m[2] += r.quality_proxy / n;
    }
    m
}

/// Metrics on which `x` protects better than `y`: lower ISM, higher FDFR,
/// larger quality distance.
fn wins(x: [f64; 3], y: [f64; 3]) -> usize {
    usize::from(x[0] < y[0]) + usize::from(x[1] > y[1]) + usize::from(x[2] > y[2])
}

fn ablation_ordering(arms: &[Arm]) -> bool {
    let sub = means(arms, |a| &a.id_cloak);
    let point = means(arms, |a| &a.single_point);
    let avg = means(arms, |a| &a.grad_avg);
    let (w_sp, w_sa, w_pa) = (wins(sub, point), wins(sub, avg), wins(point, avg));
    verdict(
        7,
        w_sp >= 2 && w_sa >= 2 && w_pa >= 2,
        format!(
            "subspace (ism {:.4} fdfr {:.3} q {:.4}), single point (ism {:.4} fdfr {:.3} q {:.4}), gradient average (ism {:.4} fdfr {:.3} q {:.4}); wins subspace/point {w_sp}, subspace/avg {w_sa}, point/avg {w_pa}",
            sub[0], sub[1], sub[2], point[0], point[1], point[2], avg[0], avg[1], avg[2]
        ),
    )
}

fn transfer(arms: &[Arm]) -> bool {
    let n = arms.len() as f64;
    let same = arms
        .iter()
        .map(|a| a.clean.ism_proxy - a.id_cloak.ism_proxy)
        .sum::<f64>()
        / n;
    let alt = arms
        .iter()
        .map(|a| a.alt_clean.ism_proxy - a.alt_id_cloak.ism_proxy)
        .sum::<f64>()
        / n;
    let ratio = if same > 0.0 { alt / same } else { f64::NAN };
    verdict(
        8,
        same > 0.0 && ratio >= 0.5,
        format!("mean ISM drop same architecture {same:.4}, other architecture {alt:.4}, retained {ratio:.2}"),
    )
}

fn main() {
    let hard = [
        algebraic(),
        gradients(),
        reductions(),
        budget_and_determinism(),
        subspace(),
    ];

    let clock = Instant::now();
    println!(
        "protection grid: {} seeds x {GRID_IDENTITIES} identities, default config, second attacker widths {ALT_WIDTHS:?}",
        GRID_SEEDS.len()
    );
    let arms = run_grid();
    let measured = [protection_ordering(&arms), ablation_ordering(&arms), transfer(&arms)];
    println!(
        "grid took {:.0}s; criteria 6-8 met: {}/3",
        clock.elapsed().as_secs_f64(),
        measured.iter().filter(|&&m| m).count()
    );

    let failed: Vec<usize> = hard
        .iter()
        .enumerate()
        .filter(|(_, &ok)| !ok)
        .map(|(i, _)| i + 1)
        .collect();
    if !failed.is_empty() {
        eprintln!("hard criteria failed: {failed:?}");
        std::process::exit(1);
    }
}
