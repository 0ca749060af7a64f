//! Acceptance gate. Each test is one criterion and prints a single
//! `PASS`/`FAIL` line; run with `--nocapture` to see them all.
//!
//! Bounds are recomputed here from `n` and `f` rather than taken from the
//! library, and counts are taken straight from the traces.

mod mutations;

use std::collections::BTreeMap;
use std::time::Instant;

use latag_core::adversary::Strategy;
use latag_core::checker::{check, Status, Verdict};
use latag_core::config::{ClientSpec, Policy, ProtocolKind, ScenarioConfig, GWTS_BUDGET_C};
use latag_core::rbcast::Instance;
use latag_core::rsm::ClientOp;
use latag_core::summary::RunSummary;
use latag_core::trace::{Event, Trace};
use latag_core::wire::MsgKind;
use latag_core::{run, NodeId};
use rayon::prelude::*;

const SIZES: [usize; 3] = [4, 7, 10];

fn f_of(n: usize) -> usize {
    (n - 1) / 3
}

/// `f` Byzantine processes, the highest identifiers, all running `s`.
fn with_adversaries(mut cfg: ScenarioConfig, strategies: &[Strategy]) -> ScenarioConfig {
    let n = cfg.n as u64;
    for i in 0..cfg.f as u64 {
        cfg = cfg.with_byzantine(n - 1 - i, strategies[i as usize % strategies.len()]);
    }
    cfg
}

/// What a criterion keeps from each run: the traces are too large to hold.
struct Outcome {
    label: String,
    verdict: Verdict,
    summary: RunSummary,
    extra: BTreeMap<&'static str, u64>,
}

fn sweep<F>(configs: Vec<(String, ScenarioConfig)>, inspect: F) -> Vec<Outcome>
where
    F: Fn(&ScenarioConfig, &Trace) -> BTreeMap<&'static str, u64> + Sync,
{
    configs
        .into_par_iter()
        .map(|(label, cfg)| {
            let out = run(&cfg).unwrap_or_else(|e| panic!("{label}: {e}"));
            let verdict = check(&out.trace, &out.roles).unwrap_or_else(|e| panic!("{label}: {e}"));
            let summary = RunSummary::from_trace(&out.trace, &out.roles, Some(&verdict));
            let extra = inspect(&cfg, &out.trace);
            Outcome {
                label,
                verdict,
                summary,
                extra,
            }
        })
        .collect()
}

fn nothing(_: &ScenarioConfig, _: &Trace) -> BTreeMap<&'static str, u64> {
    BTreeMap::new()
}

/// Prints the criterion line and fails the test on any problem.
fn report(id: u32, name: &str, started: Instant, problems: Vec<String>, detail: String) {
    let secs = started.elapsed().as_secs_f64();
    if problems.is_empty() {
        println!("PASS criterion {id:>2} {name}: {detail} ({secs:.1}s)");
    } else {
        println!("FAIL criterion {id:>2} {name}: {} problems, first: {} ({secs:.1}s)", problems.len(), problems[0]);
        panic!("criterion {id} failed:\n{}", problems.join("\n"));
    }
}

fn require(problems: &mut Vec<String>, o: &Outcome, props: &[&str]) {
    for p in props {
        match o.verdict.status(p) {
            Some(Status::Pass) => {}
            other => problems.push(format!("{}: {p} is {other:?} {:?}", o.label, o.verdict.get(p))),
        }
    }
}

fn wts_configs(policy: Policy, seeds: u64) -> Vec<(String, ScenarioConfig)> {
    let mut out = Vec::new();
    for n in SIZES {
        for s in [Strategy::Equivocator, Strategy::Silent, Strategy::NackFlooder, Strategy::StaleAcker] {
            for seed in 0..seeds {
                let cfg = with_adversaries(ScenarioConfig::new(ProtocolKind::Wts, n, f_of(n)), &[s])
                    .with_policy(policy)
                    .with_seed(seed);
                out.push((format!("wts n={n} {} seed={seed}", s.name()), cfg));
            }
        }
    }
    out
}

#[test]
fn criterion_01_wts_safety_sweep() {
    let t = Instant::now();
    let runs = sweep(wts_configs(Policy::Random, 100), nothing);
    let mut problems = Vec::new();
    for o in &runs {
        require(
            &mut problems,
            o,
            &["liveness", "comparability", "inclusivity", "non-triviality", "stability"],
        );
    }
    report(1, "wts safety sweep", t, problems, format!("{} runs", runs.len()));
}

#[test]
fn criterion_02_wts_delay_bound() {
    let t = Instant::now();
    let runs = sweep(wts_configs(Policy::Lockstep, 3), nothing);
    let mut problems = Vec::new();
    let mut worst = BTreeMap::new();
    for o in &runs {
        let bound = 2 * o.summary.f as u64 + 5;
        let decided = o.summary.nodes.iter().filter(|s| s.correct).all(|s| s.decision_depths.len() == 1);
        if !decided {
            problems.push(format!("{}: a correct process did not decide", o.label));
        }
        if o.summary.max_depth > bound {
            problems.push(format!("{}: depth {} > {bound}", o.label, o.summary.max_depth));
        }
        let w = worst.entry(o.summary.n).or_insert(0);
        *w = o.summary.max_depth.max(*w);
    }
    report(2, "wts delay bound 2f+5", t, problems, format!("max depth by n {worst:?}"));
}

#[test]
fn criterion_03_wts_refinement_bound() {
    let t = Instant::now();
    let mut configs = wts_configs(Policy::Random, 100);
    configs.extend(wts_configs(Policy::Lockstep, 3));
    let runs = sweep(configs, nothing);
    let mut problems = Vec::new();
    let mut worst = BTreeMap::new();
    for o in &runs {
        let f = o.summary.f as u64;
        for s in o.summary.nodes.iter().filter(|s| s.correct) {
            if s.refinements > f {
                problems.push(format!("{}: {:?} refined {} times > f = {f}", o.label, s.node, s.refinements));
            }
        }
        let w = worst.entry(o.summary.n).or_insert(0);
        *w = o.summary.max_refinements.max(*w);
    }
    report(3, "wts refinements <= f", t, problems, format!("max refinements by n {worst:?}"));
}

#[test]
fn criterion_04_rbcast_equivocator() {
    let t = Instant::now();
    let configs = (0..200)
        .map(|seed| {
            let cfg = ScenarioConfig::new(ProtocolKind::Rbcast, 4, 1)
                .with_byzantine(3, Strategy::Equivocator)
                .with_seed(seed);
            (format!("rbcast seed={seed}"), cfg)
        })
        .collect();
    // per-instance message counts, straight from the trace
    let runs = sweep(configs, |cfg, trace| {
        let mut per_tag: BTreeMap<_, u64> = BTreeMap::new();
        let mut deliveries: BTreeMap<_, Vec<_>> = BTreeMap::new();
        for e in trace {
            match &e.event {
                Event::Send { msg, .. } => *per_tag.entry(msg.tag).or_default() += 1,
                Event::RbDeliver { tag, payload } if e.node.0 < 3 => {
                    deliveries.entry((*tag, e.node)).or_default().push(*payload)
                }
                _ => {}
            }
        }
        let n = cfg.n as u64;
        let mut agree = 1;
        let mut by_tag: BTreeMap<_, Vec<_>> = BTreeMap::new();
        for ((tag, _), ds) in &deliveries {
            if ds.len() > 1 {
                agree = 0;
            }
            by_tag.entry(*tag).or_default().extend(ds.iter().copied());
        }
        if by_tag.values().any(|ds| ds.iter().any(|d| *d != ds[0])) {
            agree = 0;
        }
        BTreeMap::from([
            ("max_msgs", per_tag.values().copied().max().unwrap_or(0)),
            ("limit", n + 2 * n * n),
            ("oracle_ok", agree),
        ])
    });
    let mut problems = Vec::new();
    let mut most = 0;
    for o in &runs {
        require(&mut problems, o, &["agreement", "integrity", "message-count"]);
        if o.extra["max_msgs"] > o.extra["limit"] {
            problems.push(format!("{}: {} messages in one instance", o.label, o.extra["max_msgs"]));
        }
        if o.extra["oracle_ok"] != 1 {
            problems.push(format!("{}: trace scan found a disagreement", o.label));
        }
        most = most.max(o.extra["max_msgs"]);
    }
    report(4, "rbcast equivocator", t, problems, format!("{} runs, max {most} msgs/instance <= 36", runs.len()));
}

fn gwts_configs() -> Vec<(String, ScenarioConfig)> {
    let mut out = Vec::new();
    for n in [4, 7] {
        for seed in 0..50 {
            let mut cfg = with_adversaries(ScenarioConfig::new(ProtocolKind::Gwts, n, f_of(n)), &[Strategy::RoundJumper])
                .with_seed(seed);
            cfg.rounds = 10;
            out.push((format!("gwts n={n} round-jumper seed={seed}"), cfg));
        }
    }
    out
}

/// The closed-form per-decision envelope count: one disclosure broadcast plus,
/// for each of at most `f + 1` ack requests, `n` requests and up to `n`
/// acknowledgement broadcasts.
fn gwts_bound(n: u64, f: u64) -> u64 {
    let rb = n + 2 * n * n;
    rb + (f + 1) * (n + n * rb)
}

/// Charges each correct-process envelope to the correct proposer round it
/// serves, counted independently of the library.
fn round_costs(cfg: &ScenarioConfig, trace: &Trace) -> BTreeMap<&'static str, u64> {
    let byz: Vec<NodeId> = cfg.byzantine.iter().map(|b| b.node).collect();
    let correct = |p: NodeId| !byz.contains(&p);
    let mut cost: BTreeMap<(NodeId, u64), u64> = BTreeMap::new();
    for e in trace {
        let Event::Send { dst, msg } = &e.event else { continue };
        if !correct(e.node) {
            continue;
        }
        let key = match (msg.kind, msg.tag) {
            (MsgKind::GwtsAckReq, _) => Some((e.node, msg.round.unwrap())),
            (MsgKind::GwtsNack, _) => Some((*dst, msg.round.unwrap())),
            (_, Some(tag)) if correct(tag.sender) => match tag.instance {
                Instance::Disclosure { round } => Some((tag.sender, round)),
                Instance::Ack { round, destination, .. } => Some((destination, round)),
            },
            _ => None,
        };
        if let Some(k) = key.filter(|k| correct(k.0)) {
            *cost.entry(k).or_default() += 1;
        }
    }
    BTreeMap::from([("max_cost", cost.values().copied().max().unwrap_or(0))])
}

#[test]
fn criterion_05_gwts_liveness_safety() {
    let t = Instant::now();
    let runs = sweep(gwts_configs(), nothing);
    let mut problems = Vec::new();
    let mut fewest = u64::MAX;
    for o in &runs {
        require(
            &mut problems,
            o,
            &["liveness", "local-stability", "comparability", "inclusivity", "non-triviality", "safe-r-gating"],
        );
        for s in o.summary.nodes.iter().filter(|s| s.correct) {
            let d = s.decision_depths.len() as u64;
            fewest = fewest.min(d);
            if d < 10 {
                problems.push(format!("{}: {:?} made {d} decisions", o.label, s.node));
            }
        }
    }
    report(5, "gwts 10 rounds vs round-jumper", t, problems, format!("{} runs, min decisions {fewest}", runs.len()));
}

#[test]
fn criterion_06_gwts_message_budget() {
    let t = Instant::now();
    let mut configs = gwts_configs();
    for n in [4, 7] {
        for s in [Strategy::NackFlooder, Strategy::Equivocator, Strategy::Silent] {
            for seed in 0..10 {
                let mut cfg = with_adversaries(ScenarioConfig::new(ProtocolKind::Gwts, n, f_of(n)), &[s]).with_seed(seed);
                cfg.rounds = 5;
                configs.push((format!("gwts n={n} {} seed={seed}", s.name()), cfg));
            }
        }
    }
    let runs = sweep(configs, round_costs);
    let mut problems = Vec::new();
    let mut ratio: BTreeMap<usize, f64> = BTreeMap::new();
    for o in &runs {
        require(&mut problems, o, &["message-budget"]);
        let (n, f) = (o.summary.n as u64, o.summary.f as u64);
        let allowance = GWTS_BUDGET_C * (f.max(1) * n * n) as f64;
        let cost = o.extra["max_cost"];
        if cost as f64 > allowance {
            problems.push(format!("{}: {cost} envelopes > {allowance}", o.label));
        }
        if cost > gwts_bound(n, f) {
            problems.push(format!("{}: {cost} envelopes above the closed form {}", o.label, gwts_bound(n, f)));
        }
        if o.summary.max_round_cost != Some(cost) {
            problems.push(format!("{}: library count {:?} != {cost}", o.label, o.summary.max_round_cost));
        }
        let r = ratio.entry(o.summary.n).or_insert(0.0);
        *r = r.max(cost as f64 / (f.max(1) * n * n) as f64);
    }
    report(
        6,
        "gwts per-decision budget c*f*n^2",
        t,
        problems,
        format!("c = {GWTS_BUDGET_C}, observed max cost/(f n^2) by n {ratio:.2?}"),
    );
}

fn sbs_configs(policy: Policy, seeds: u64) -> Vec<(String, ScenarioConfig)> {
    let mut out = Vec::new();
    for n in SIZES {
        let f = f_of(n);
        let mut mixes = vec![
            ("double-signer", vec![Strategy::DoubleSigner]),
            ("nack-flooder", vec![Strategy::NackFlooder]),
        ];
        if f > 1 {
            mixes.push(("mixed", vec![Strategy::DoubleSigner, Strategy::NackFlooder]));
        }
        for (name, mix) in mixes {
            for seed in 0..seeds {
                let cfg = with_adversaries(ScenarioConfig::new(ProtocolKind::Sbs, n, f), &mix)
                    .with_policy(policy)
                    .with_seed(seed);
                out.push((format!("sbs n={n} {name} seed={seed}"), cfg));
            }
        }
    }
    out
}

fn proposer_sends(cfg: &ScenarioConfig, trace: &Trace) -> BTreeMap<&'static str, u64> {
    let mut sent: BTreeMap<NodeId, u64> = BTreeMap::new();
    for e in trace {
        if let Event::Send { msg, .. } = &e.event {
            let request = matches!(
                msg.kind,
                MsgKind::SbsInit | MsgKind::SbsSafeReq | MsgKind::SbsAckReq
            );
            if request && cfg.strategy_of(e.node).is_none() {
                *sent.entry(e.node).or_default() += 1;
            }
        }
    }
    BTreeMap::from([("max_sends", sent.values().copied().max().unwrap_or(0))])
}

#[test]
fn criterion_07_sbs() {
    let t = Instant::now();
    let mut configs = sbs_configs(Policy::Random, 100);
    configs.extend(sbs_configs(Policy::Lockstep, 2));
    let runs = sweep(configs, proposer_sends);
    let mut problems = Vec::new();
    let mut worst: BTreeMap<usize, (u64, u64, u64)> = BTreeMap::new();
    for o in &runs {
        require(
            &mut problems,
            o,
            &["liveness", "stability", "comparability", "inclusivity", "non-triviality"],
        );
        let (n, f) = (o.summary.n as u64, o.summary.f as u64);
        let lockstep = o.verdict.status("delay-bound") != Some(Status::Skipped);
        if lockstep && o.summary.max_depth > 5 + 4 * f {
            problems.push(format!("{}: depth {} > 5+4f", o.label, o.summary.max_depth));
        }
        if o.summary.max_refinements > 2 * f {
            problems.push(format!("{}: {} refinements > 2f", o.label, o.summary.max_refinements));
        }
        if o.extra["max_sends"] > (3 + 2 * f) * n {
            problems.push(format!("{}: {} sends > (3+2f)n", o.label, o.extra["max_sends"]));
        }
        let w = worst.entry(o.summary.n).or_default();
        if lockstep {
            w.0 = w.0.max(o.summary.max_depth);
        }
        w.1 = w.1.max(o.summary.max_refinements);
        w.2 = w.2.max(o.extra["max_sends"]);
    }
    report(7, "sbs", t, problems, format!("{} runs, (depth, refinements, sends) by n {worst:?}", runs.len()));
}

#[test]
fn criterion_08_sbs_signer_uniqueness() {
    let t = Instant::now();
    let configs = sbs_configs(Policy::Random, 100)
        .into_iter()
        .filter(|(l, _)| !l.contains("nack-flooder"))
        .collect();
    let runs = sweep(configs, |_, trace| {
        let proofs = trace.iter().filter(|e| matches!(e.event, Event::SbsProof { .. })).count();
        BTreeMap::from([("proofs", proofs as u64)])
    });
    let mut problems = Vec::new();
    let mut scanned = 0;
    for o in &runs {
        require(&mut problems, o, &["signer-uniqueness"]);
        scanned += o.extra["proofs"];
    }
    report(8, "sbs one proven value per signer", t, problems, format!("{} runs, {scanned} proofs scanned", runs.len()));
}

#[test]
fn criterion_09_rsm() {
    let t = Instant::now();
    let ops = |c: u8| {
        vec![
            ClientOp::Update { payload: vec![b'a', c].into() },
            ClientOp::Read,
            ClientOp::Update { payload: vec![b'b', c].into() },
            ClientOp::Read,
        ]
    };
    let configs = (0..50)
        .map(|seed| {
            let mut cfg = ScenarioConfig::new(ProtocolKind::Rsm, 4, 1)
                .with_byzantine(1, Strategy::FabricatorReplica)
                .with_seed(seed);
            for c in 0..3 {
                cfg.clients.push(ClientSpec { ops: ops(c), byzantine: false });
            }
            cfg.clients.push(ClientSpec { ops: Vec::new(), byzantine: true });
            (format!("rsm seed={seed}"), cfg)
        })
        .collect();
    let runs = sweep(configs, nothing);
    let mut problems = Vec::new();
    for o in &runs {
        require(
            &mut problems,
            o,
            &[
                "liveness",
                "read-validity",
                "read-consistency",
                "read-monotonicity",
                "update-stability",
                "update-visibility",
            ],
        );
    }
    report(9, "rsm with bad client and fabricator", t, problems, format!("{} runs", runs.len()));
}

#[test]
fn criterion_10_process_lower_bound() {
    let t = Instant::now();
    let mut problems = Vec::new();
    let mut checked = 0;
    for n in 1..=13 {
        for f in 0..=4 {
            checked += 1;
            let ok = ScenarioConfig::new(ProtocolKind::Wts, n, f).validate().is_ok();
            if ok != (n > 3 * f) {
                problems.push(format!("n={n} f={f}: accepted = {ok}"));
            }
        }
    }
    if run(&ScenarioConfig::new(ProtocolKind::Gwts, 3, 1)).is_ok() {
        problems.push("run accepted n=3 f=1".into());
    }
    report(10, "n < 3f+1 rejected", t, problems, format!("{checked} (n, f) pairs"));
}

#[test]
fn criterion_11_checker_mutations() {
    let t = Instant::now();
    let cases = mutations::all();
    let problems: Vec<String> = cases
        .iter()
        .filter(|c| !c.detected)
        .map(|c| format!("{} / {}: not detected", c.protocol, c.property))
        .collect();
    report(11, "checker mutation suite", t, problems, format!("{} mutations detected", cases.len()));
}

#[test]
fn criterion_12_determinism() {
    let t = Instant::now();
    let mut configs: Vec<ScenarioConfig> = Vec::new();
    for seed in [0, 7, 1234] {
        configs.push(
            ScenarioConfig::new(ProtocolKind::Wts, 7, 2)
                .with_byzantine(6, Strategy::Equivocator)
                .with_seed(seed),
        );
        configs.push(ScenarioConfig::new(ProtocolKind::Rbcast, 4, 1).with_byzantine(3, Strategy::Equivocator).with_seed(seed));
        let mut g = ScenarioConfig::new(ProtocolKind::Gwts, 4, 1).with_byzantine(3, Strategy::RoundJumper).with_seed(seed);
        g.rounds = 3;
        configs.push(g);
        configs.push(ScenarioConfig::new(ProtocolKind::Sbs, 7, 2).with_byzantine(5, Strategy::DoubleSigner).with_seed(seed));
        let mut r = ScenarioConfig::new(ProtocolKind::Rsm, 4, 1).with_seed(seed);
        r.clients.push(ClientSpec { ops: vec![ClientOp::Update { payload: b"x".to_vec().into() }, ClientOp::Read], byzantine: false });
        configs.push(r);
        configs.push(
            ScenarioConfig::new(ProtocolKind::Wts, 4, 1)
                .with_byzantine(3, Strategy::NackFlooder)
                .with_policy(Policy::Lockstep)
                .with_seed(seed),
        );
    }
    let problems: Vec<String> = configs
        .par_iter()
        .filter_map(|cfg| {
            let a = run(cfg).unwrap().trace.to_jsonl();
            let b = run(cfg).unwrap().trace.to_jsonl();
            let reparsed = Trace::read_jsonl(&a[..]).unwrap().to_jsonl();
            (a != b || a != reparsed).then(|| format!("{} seed {} differs", cfg.protocol.name(), cfg.scheduler.seed))
        })
        .collect();
    report(12, "determinism", t, problems, format!("{} configs replayed", configs.len()));
}
