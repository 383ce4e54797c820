//! End-to-end acceptance checks on the blob benchmark. Prints one PASS/FAIL
//! line per criterion and exits nonzero if any fails.

mod common;

use std::fs;
use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use replaykd::distill::{run_distillation, run_distillation_with, DistillConfig, Footprint, Memory, ReplayMode};
use replaykd::losses::{self, Reconstruction};
use replaykd::metrics::{noise_sensitivity, summarize_runs, MetricsRecord};
use replaykd::models::{EncoderOutput, MlpModel};
use replaykd::replay::{batch_class_entropy, infer_memory_batch};
use replaykd::rng::{gaussian_sample, Rng};
use replaykd::tape::Tape;
use replaykd::tensor::live_tensor_stats;
use replaykd::Tensor;

use common::{benchmark_teacher, mlp_bytes, worst_gradient_error, LOSS_NAMES};

const SEEDS: [u64; 4] = [0, 1, 2, 3];

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: String) -> Verdict {
    Verdict { pass, detail }
}

fn gradient_suite() -> Verdict {
    let start = Instant::now();
    let mut worst = ("", 0.0f64);
    for name in LOSS_NAMES {
        let err = worst_gradient_error(name, 100, 101);
        if err > worst.1 {
            worst = (name, err);
        }
    }
    let elapsed = start.elapsed();
    verdict(
        worst.1 < 1e-5 && elapsed < Duration::from_secs(60),
        format!("worst relative error {:.2e} ({}), {:.1}s", worst.1, worst.0, elapsed.as_secs_f64()),
    )
}

fn closed_forms() -> Verdict {
    let mut tape = Tape::new();
    let p = tape.constant(Tensor::from_rows(&[vec![0.2, 0.5, 0.3], vec![0.6, 0.1, 0.3]]).unwrap());
    let js_same = losses::js_divergence(&mut tape, p, p).unwrap();
    let a = tape.constant(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap());
    let b = tape.constant(Tensor::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap());
    let js_disjoint = losses::js_divergence(&mut tape, a, b).unwrap();
    let mu = tape.constant(Tensor::full(&[1, 1], 1.0));
    let log_var = tape.constant(Tensor::zeros(&[1, 1]));
    let kl = losses::gaussian_kld(&mut tape, EncoderOutput { mu, log_var }).unwrap();
    let c = 7;
    let u = tape.constant(Tensor::full(&[3, c], 1.0 / c as f64));
    let h = losses::categorical_entropy(&mut tape, u).unwrap();

    let errs = [
        tape.value(js_same).item().unwrap().abs(),
        (tape.value(js_disjoint).item().unwrap() - 1.0).abs(),
        (tape.value(kl).item().unwrap() - 0.5).abs(),
        (tape.value(h).item().unwrap() - (c as f64).ln()).abs(),
    ];
    let worst = errs.iter().copied().fold(0.0, f64::max);
    verdict(worst < 1e-10, format!("max deviation {worst:.2e}"))
}

/// Runs of one configuration over the paired seeds.
struct Arm {
    records: Vec<MetricsRecord>,
}

impl Arm {
    fn mean(&self) -> Vec<f64> {
        self.records.iter().map(MetricsRecord::mean_accuracy).collect()
    }
}

fn gap(r: &MetricsRecord) -> f64 {
    r.peak_accuracy() - r.final_accuracy()
}

fn pct(v: &[f64]) -> String {
    let parts: Vec<String> = v.iter().map(|x| format!("{:.1}", 100.0 * x)).collect();
    parts.join("/")
}

/// Audit trail of an instrumented pre-dfkd run.
struct Audit {
    footprints: Vec<Footprint>,
    /// Tensors alive after each epoch beyond those alive before the run.
    live_tensors: Vec<usize>,
}

fn audited_run(cfg: &DistillConfig, teacher: &MlpModel, eval: &replaykd::data::Dataset) -> (replaykd::distill::DistillOutcome, Audit) {
    let mut audit = Audit {
        footprints: Vec::new(),
        live_tensors: Vec::new(),
    };
    let baseline = live_tensor_stats().0;
    let outcome = run_distillation_with(cfg, teacher.clone(), eval, |state, _| {
        audit.footprints.push(state.footprint());
        audit.live_tensors.push(live_tensor_stats().0 - baseline);
    })
    .unwrap();
    (outcome, audit)
}

fn main() -> ExitCode {
    let mut results: Vec<(&str, Verdict)> = Vec::new();
    let report = |name: &'static str, v: Verdict, results: &mut Vec<(&str, Verdict)>| {
        println!("{} {name}: {}", if v.pass { "PASS" } else { "FAIL" }, v.detail);
        results.push((name, v));
    };

    report("1 gradient suite", gradient_suite(), &mut results);
    report("2 closed forms", closed_forms(), &mut results);

    let (teacher, eval) = benchmark_teacher();
    let teacher_acc = replaykd::metrics::evaluate(&teacher, &eval).unwrap();

    let start = Instant::now();
    let no_replay = Arm {
        records: SEEDS
            .iter()
            .map(|&s| run_distillation(&DistillConfig::benchmark(ReplayMode::NoReplay, s), teacher.clone(), &eval).unwrap().record)
            .collect(),
    };
    let mut pre_states = Vec::new();
    let mut audit_100 = None;
    let mut pre_records = Vec::new();
    for &s in &SEEDS {
        let (outcome, audit) = audited_run(&DistillConfig::benchmark(ReplayMode::PreDfkd, s), &teacher, &eval);
        if s == SEEDS[0] {
            audit_100 = Some(audit);
        }
        pre_records.push(outcome.record);
        pre_states.push(outcome.state);
    }
    let pre = Arm { records: pre_records };
    let ab_elapsed = start.elapsed();

    let nr = summarize_runs(&no_replay.records).unwrap();
    let pd = summarize_runs(&pre.records).unwrap();
    report(
        "3 forgetting A/B",
        verdict(
            teacher_acc >= 0.99
                && pd.mu - nr.mu >= 0.03
                && pd.sigma2 < nr.sigma2
                && ab_elapsed < Duration::from_secs(15 * 60),
            format!(
                "teacher {:.1}%, mu {:.1} vs {:.1}, sigma2 {:.5} vs {:.5} (pre-dfkd vs no-replay), {:.0}s",
                100.0 * teacher_acc,
                100.0 * pd.mu,
                100.0 * nr.mu,
                pd.sigma2,
                nr.sigma2,
                ab_elapsed.as_secs_f64()
            ),
        ),
        &mut results,
    );

    let forgets = no_replay.records.iter().filter(|r| gap(r) >= 0.02).count();
    let smaller = no_replay.records.iter().zip(&pre.records).filter(|(n, p)| gap(p) < gap(n)).count();
    let nr_gaps: Vec<f64> = no_replay.records.iter().map(gap).collect();
    let pd_gaps: Vec<f64> = pre.records.iter().map(gap).collect();
    report(
        "4 peak retention",
        verdict(
            forgets >= 3 && smaller == SEEDS.len(),
            format!("peak-final gaps no-replay {} pre-dfkd {}", pct(&nr_gaps), pct(&pd_gaps)),
        ),
        &mut results,
    );

    let full = pre.mean();
    let ablate = |change: &dyn Fn(&mut DistillConfig)| -> Vec<f64> {
        SEEDS
            .iter()
            .map(|&s| {
                let mut cfg = DistillConfig::benchmark(ReplayMode::PreDfkd, s);
                change(&mut cfg);
                run_distillation(&cfg, teacher.clone(), &eval).unwrap().record.mean_accuracy()
            })
            .collect()
    };
    let pixel = ablate(&|c| c.reconstruction = Reconstruction::PixelOnly);
    let untuned = ablate(&|c| c.latent_tuning = false);
    let le = |v: &[f64]| v.iter().zip(&full).filter(|(a, f)| a <= f).count();
    report(
        "5 ablations",
        verdict(
            le(&pixel) >= 3 && le(&untuned) >= 3,
            format!(
                "full {}, pixel-only {} ({}/4 <= full), no latent tuning {} ({}/4 <= full)",
                pct(&full),
                pct(&pixel),
                le(&pixel),
                pct(&untuned),
                le(&untuned)
            ),
        ),
        &mut results,
    );

    let mut entropies = Vec::new();
    for (state, &s) in pre_states.iter().zip(&SEEDS) {
        let Memory::Vae(replay) = &state.memory else {
            unreachable!("pre-dfkd state without a memory generator")
        };
        let cfg = DistillConfig::benchmark(ReplayMode::PreDfkd, s);
        let draw = |steps| {
            let mut rng = Rng::new(s);
            let batch = infer_memory_batch(replay, &state.teacher, cfg.batch_memory, steps, cfg.lr_latent, 0, &mut rng).unwrap();
            batch_class_entropy(&state.teacher, &batch.samples).unwrap()
        };
        entropies.push((draw(cfg.tuning_steps), draw(0)));
    }
    let higher = entropies.iter().filter(|(t, u)| t > u).count();
    let shown: Vec<String> = entropies.iter().map(|(t, u)| format!("{t:.4}>{u:.4}")).collect();
    report(
        "6 tuned batch entropy",
        verdict(higher == SEEDS.len(), format!("tuned vs untuned {}", shown.join(" "))),
        &mut results,
    );

    let mut rng = Rng::new(0);
    let real = eval.x.select_rows(&[0]).unwrap();
    let z = gaussian_sample(&mut rng, &[1, pre_states[0].generator.input_dim()]).unwrap();
    let synthetic = pre_states[0].generator.predict(&z).unwrap();
    let real_rate = noise_sensitivity(&real, &teacher, 0.2, 1000, &mut rng).unwrap();
    let synth_rate = noise_sensitivity(&synthetic, &teacher, 0.2, 1000, &mut rng).unwrap();
    report(
        "7 noise sensitivity",
        verdict(
            real_rate - synth_rate >= 0.20,
            format!("real {real_rate:.3} synthetic {synth_rate:.3}"),
        ),
        &mut results,
    );

    let mut short_cfg = DistillConfig::benchmark(ReplayMode::PreDfkd, SEEDS[0]);
    short_cfg.epochs = 10;
    let (_, audit_10) = audited_run(&short_cfg, &teacher, &eval);
    let audit_100 = audit_100.unwrap();
    let cfg = DistillConfig::benchmark(ReplayMode::PreDfkd, 0);
    let d_x = teacher.input_dim();
    let mut enc = vec![d_x];
    enc.extend(cfg.vae_hidden.iter().rev());
    let head = *enc.last().unwrap();
    let mut dec = vec![cfg.latent_dim];
    dec.extend(&cfg.vae_hidden);
    dec.push(d_x);
    let vae_bytes = mlp_bytes(&enc) + 2 * mlp_bytes(&[head, cfg.latent_dim]) + mlp_bytes(&dec);
    let all: Vec<&Footprint> = audit_10.footprints.iter().chain(&audit_100.footprints).collect();
    let no_samples = all.iter().all(|f| f.stored_sample_bytes == 0);
    let replay_ok = all.iter().all(|f| f.replay_param_bytes == vae_bytes);
    let state_const = all.iter().all(|f| f.tensor_bytes == all[0].tensor_bytes);
    // The first epoch warms up optimizer state; afterwards nothing may accumulate.
    let live_const = |a: &Audit| a.live_tensors[1..].iter().all(|&n| n == a.live_tensors[1]);
    let live_ok = live_const(&audit_10) && live_const(&audit_100) && audit_10.live_tensors[1] == audit_100.live_tensors[1];
    report(
        "8 zero raw storage",
        verdict(
            no_samples && replay_ok && state_const && live_ok,
            format!(
                "stored samples {}, replay params {} B (expected {vae_bytes}), state {} B, live tensors {}..{} over 10 and {}..{} over 100 epochs",
                all.iter().map(|f| f.stored_sample_bytes).max().unwrap(),
                all[0].replay_param_bytes,
                all[0].tensor_bytes,
                audit_10.live_tensors[1],
                audit_10.live_tensors.last().unwrap(),
                audit_100.live_tensors[1],
                audit_100.live_tensors.last().unwrap()
            ),
        ),
        &mut results,
    );

    report("9 CLI determinism", cli_determinism(), &mut results);

    let failed = results.iter().filter(|(_, v)| !v.pass).count();
    println!("{} of {} criteria passed", results.len() - failed, results.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

fn run_cli(args: &[&str]) -> Result<String, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_replaykd"))
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(String::from_utf8_lossy(&out.stdout).into_owned())
    } else {
        Err(String::from_utf8_lossy(&out.stderr).into_owned())
    }
}

fn cli_determinism() -> Verdict {
    let dir = tempfile::tempdir().unwrap();
    let shipped = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/blobs.cfg");
    let text = fs::read_to_string(shipped).unwrap().replace("epochs = 100", "epochs = 20");
    let config = dir.path().join("run.cfg");
    fs::write(&config, text).unwrap();
    let config = config.to_str().unwrap();
    let teacher = dir.path().join("teacher.ckpt");
    let teacher = teacher.to_str().unwrap();
    if let Err(e) = run_cli(&["train-teacher", "--config", config, "--data", "blobs:train", "--out", teacher]) {
        return verdict(false, format!("train-teacher failed: {e}"));
    }
    let mut outputs = Vec::new();
    for run in ["a", "b"] {
        let out_dir = dir.path().join(run);
        if let Err(e) = run_cli(&[
            "distill",
            "--config",
            config,
            "--teacher",
            teacher,
            "--mode",
            "pre-dfkd",
            "--out-dir",
            out_dir.to_str().unwrap(),
        ]) {
            return verdict(false, format!("distill failed: {e}"));
        }
        outputs.push(out_dir);
    }
    let files = ["curves.csv", "student.ckpt", "generator.ckpt", "summary.txt"];
    let differing: Vec<&str> = files
        .iter()
        .copied()
        .filter(|f| fs::read(outputs[0].join(f)).unwrap() != fs::read(outputs[1].join(f)).unwrap())
        .collect();
    verdict(
        differing.is_empty(),
        if differing.is_empty() {
            format!("{} identical across two runs", files.join(", "))
        } else {
            format!("differing: {}", differing.join(", "))
        },
    )
}
