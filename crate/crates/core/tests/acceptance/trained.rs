//! Criteria that need trained networks. Models are trained once and shared
//! between criteria.

use std::collections::HashMap;
use std::time::Instant;

use lamp_core::detect::{dominance, RocPoint};
use lamp_core::experiment::{score_model, score_omp, summarize, train_method, Method, MethodEval};
use lamp_core::signal_model::{generate_dataset, Dataset, SystemConfig};
use lamp_core::train::{TrainConfig, TrainLog};

use super::Verdict;

const DEPTH: usize = 10;
const TARGET_FA: f64 = 0.1;
const GRID: usize = 400;
const DOMINANCE_POINTS: usize = 50;

/// Frames per split.
struct Sizes {
    train: usize,
    validation: usize,
    test: usize,
}

const SIZES: Sizes = Sizes {
    train: 5000,
    validation: 1000,
    test: 5000,
};

/// The default schedule with every phase capped for runtime.
fn budget() -> TrainConfig {
    TrainConfig {
        max_steps: 2000,
        joint_max_steps: Some(200),
        seed: 7,
        verbose: std::env::var_os("LAMP_ACCEPTANCE_VERBOSE").is_some(),
        ..TrainConfig::default()
    }
}

struct Scenario {
    config: SystemConfig,
    train: Dataset,
    validation: Dataset,
    test: Dataset,
}

impl Scenario {
    fn new(config: SystemConfig) -> Self {
        Scenario {
            train: generate_dataset(&config, SIZES.train, "train").unwrap(),
            validation: generate_dataset(&config, SIZES.validation, "validation").unwrap(),
            test: generate_dataset(&config, SIZES.test, "test").unwrap(),
            config,
        }
    }
}

struct Outcome {
    eval: MethodEval,
    log: Option<TrainLog>,
}

impl Outcome {
    fn missed(&self) -> f64 {
        self.eval.at_target.missed_detection.expect("test sets contain active users")
    }
}

#[derive(Default)]
struct Lab {
    scenarios: HashMap<(usize, usize, usize), Scenario>,
    outcomes: HashMap<(usize, usize, usize, Method), Outcome>,
}

fn key(c: &SystemConfig) -> (usize, usize, usize) {
    (c.users, c.antennas, c.guard)
}

impl Lab {
    fn get(&mut self, config: &SystemConfig, method: Method) -> &Outcome {
        let k = key(config);
        let scenario = self.scenarios.entry(k).or_insert_with(|| Scenario::new(config.clone()));
        self.outcomes.entry((k.0, k.1, k.2, method)).or_insert_with(|| {
            let t = Instant::now();
            let (scores, log) = match method {
                Method::Omp => (score_omp(&scenario.test).unwrap(), None),
                m => {
                    let (model, log) = train_method(m, &scenario.train, &scenario.validation, DEPTH, &budget())
                        .unwrap()
                        .expect("network method");
                    (score_model(&model, &scenario.test).unwrap(), m.is_trained().then_some(log))
                }
            };
            let eval = summarize(&scores, GRID, TARGET_FA).unwrap();
            eprintln!(
                "  {method} N={} M={} T_g={}: missed {:?} at false alarm {:?} [{:.0} s]",
                scenario.config.users,
                scenario.config.antennas,
                scenario.config.guard,
                eval.at_target.missed_detection,
                eval.at_target.false_alarm,
                t.elapsed().as_secs_f64()
            );
            Outcome { eval, log }
        })
    }

    fn roc(&mut self, config: &SystemConfig, method: Method) -> Vec<RocPoint> {
        self.get(config, method).eval.roc.clone()
    }

    fn missed(&mut self, config: &SystemConfig, method: Method) -> f64 {
        self.get(config, method).missed()
    }
}

fn paper() -> SystemConfig {
    SystemConfig::paper()
}

fn desk(antennas: usize, guard: usize) -> SystemConfig {
    SystemConfig {
        antennas,
        guard,
        max_delay: guard,
        ..SystemConfig::desk()
    }
}

/// `a` strictly below `b` at every compared point of the shared false-alarm
/// range.
fn beats(lab: &mut Lab, config: &SystemConfig, a: Method, b: Method) -> (bool, String) {
    let ra = lab.roc(config, a);
    let rb = lab.roc(config, b);
    match dominance(&ra, &rb, DOMINANCE_POINTS) {
        Some((n, margin, at)) if n > 0 => (
            margin > 0.0,
            format!("{a} < {b} on {n} points, worst margin {margin:+.4} at false alarm {at:.3}"),
        ),
        _ => (false, format!("{a} vs {b}: no shared false-alarm range")),
    }
}

fn criterion_5(lab: &mut Lab) -> Verdict {
    let c = paper();
    let mut pass = true;
    let mut parts = Vec::new();
    for (a, b) in [
        (Method::LampSt, Method::AmpSt),
        (Method::AmpMmse, Method::LampSt),
        (Method::AmpMmse, Method::Omp),
    ] {
        let (ok, text) = beats(lab, &c, a, b);
        pass &= ok;
        parts.push(text);
    }
    let lamp = lab.missed(&c, Method::LampMmse);
    let amp = lab.missed(&c, Method::AmpMmse);
    pass &= lamp <= amp + 0.01;
    parts.push(format!("lamp_mmse {lamp:.4} vs amp_mmse {amp:.4} (+0.01) at false alarm 0.1"));
    Verdict::new(pass, parts.join("; "))
}

fn criterion_6(lab: &mut Lab) -> Verdict {
    let mut pass = true;
    let mut parts = Vec::new();
    let methods = [Method::LampCMmse, Method::LampH(2), Method::LampD];
    let mut md = HashMap::new();
    for m in [2usize, 4] {
        for method in methods {
            md.insert((m, method), lab.missed(&desk(m, 3), method));
        }
    }
    let (c4, h4, d4) = (md[&(4, methods[0])], md[&(4, methods[1])], md[&(4, methods[2])]);
    pass &= c4 <= h4 && h4 <= d4;
    parts.push(format!("M=4: C {c4:.4} <= H(2) {h4:.4} <= D {d4:.4}"));
    let c2 = md[&(2, methods[0])];
    let d2 = md[&(2, methods[2])];
    pass &= c2 <= d2;
    parts.push(format!("M=2: C {c2:.4} <= D {d2:.4}"));
    for method in methods {
        let (two, four) = (md[&(2, method)], md[&(4, method)]);
        pass &= four < two;
        parts.push(format!("{method} M=4 {four:.4} < M=2 {two:.4}"));
    }
    Verdict::new(pass, parts.join("; "))
}

fn criterion_7(lab: &mut Lab) -> Verdict {
    let mut pass = true;
    let mut parts = Vec::new();
    let mut gaps = HashMap::new();
    for (antennas, method) in [
        (1, Method::LampMmse),
        (4, Method::LampCMmse),
        (4, Method::LampD),
        (4, Method::LampH(2)),
    ] {
        let curve: Vec<f64> = (0..4).map(|g| lab.missed(&desk(antennas, g), method)).collect();
        let monotone = curve.windows(2).all(|w| w[1] >= w[0]);
        pass &= monotone;
        gaps.insert(method, curve[3] - curve[0]);
        let shown: Vec<String> = curve.iter().map(|v| format!("{v:.4}")).collect();
        parts.push(format!(
            "{method} M={antennas} over T_g 0..3: [{}]{}",
            shown.join(", "),
            if monotone { "" } else { " not monotone" }
        ));
    }
    let (gc, gd) = (gaps[&Method::LampCMmse], gaps[&Method::LampD]);
    pass &= gc < gd;
    parts.push(format!("gap C {gc:.4} < gap D {gd:.4}"));
    Verdict::new(pass, parts.join("; "))
}

fn criterion_8(lab: &mut Lab) -> Verdict {
    let c = paper();
    let mut pass = true;
    let mut parts = Vec::new();
    for method in [Method::LampSt, Method::LampMmse] {
        let log = lab.get(&c, method).log.as_ref().expect("trained");
        let bad: Vec<&str> = log.phases.iter().filter(|p| !p.snapshot_is_best()).map(|p| p.name.as_str()).collect();
        let rising: Vec<usize> = log
            .layer_val_mse
            .windows(2)
            .enumerate()
            .filter(|(_, w)| w[1] > w[0])
            .map(|(i, _)| i + 2)
            .collect();
        pass &= bad.is_empty() && rising.is_empty();
        let layers: Vec<String> = log.layer_val_mse.iter().map(|v| format!("{v:.4}")).collect();
        parts.push(format!(
            "{method}: {} phases, {} without best snapshot; per-layer MSE [{}]{}",
            log.phases.len(),
            bad.len(),
            layers.join(", "),
            if rising.is_empty() {
                String::new()
            } else {
                format!(" rises at layers {rising:?}")
            }
        ));
    }
    // The snapshot invariant also holds for every other run of the suite.
    let others = lab
        .outcomes
        .values()
        .filter_map(|o| o.log.as_ref())
        .flat_map(|l| l.phases.iter())
        .filter(|p| !p.snapshot_is_best())
        .count();
    pass &= others == 0;
    parts.push(format!("{others} phases without best snapshot across all trained runs"));
    Verdict::new(pass, parts.join("; "))
}

pub fn run(wanted: &dyn Fn(usize) -> bool) -> Vec<(usize, Verdict)> {
    let mut lab = Lab::default();
    let mut out = Vec::new();
    let criteria: [(usize, fn(&mut Lab) -> Verdict); 4] =
        [(5, criterion_5), (6, criterion_6), (7, criterion_7), (8, criterion_8)];
    for (n, f) in criteria {
        if wanted(n) {
            let t = Instant::now();
            let mut v = f(&mut lab);
            v.detail += &format!(" [{:.0} s]", t.elapsed().as_secs_f64());
            println!("{}", v.line(n));
            out.push((n, v));
        }
    }
    out
}
