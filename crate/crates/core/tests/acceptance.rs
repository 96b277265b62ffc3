//! Acceptance suite: one test per criterion, each printing a PASS line with
//! the measured values. Run with `cargo test -p nestpipe-core --test
//! acceptance -- --nocapture` to see every line.

use nestpipe_core::sim::DurationSpec;
use nestpipe_core::*;

fn full_placement(config: &PipelineConfig, gen: bool) -> ModulePlacement {
    ModulePlacement::full(config, gen)
}

fn wired(strategy: Strategy, config: PipelineConfig, gen: bool) -> Schedule {
    let schedule = build_strategy(strategy, config, full_placement(&config, gen)).unwrap();
    let wired = insert_comm_ops(&schedule, &PayloadBytes::default()).unwrap();
    assert!(
        deadlock_check(&wired, CommSemantics::default())
            .unwrap()
            .is_ok(),
        "{strategy} deadlock-free"
    );
    wired
}

fn run(strategy: Strategy, config: PipelineConfig, gen: bool, cost: &CostModel) -> Timeline {
    simulate(
        &wired(strategy, config, gen),
        cost,
        CommSemantics::default(),
    )
    .unwrap()
}

/// Criterion 1: simulated 1F1B with uniform costs, zero comm, fwd = bwd,
/// P = 4, M = 64 yields last-rank bubble rate (P-1)/(M+P-1) = 3/67 measured
/// over the pipeline makespan, within 1e-9.
#[test]
fn criterion_1_bubble_rate_formula() {
    let config = PipelineConfig::new(4, 64, 1, 1);
    let schedule = generate_1f1b(config).unwrap();
    let comm = insert_comm_ops(&schedule, &PayloadBytes::default()).unwrap();
    let timeline = simulate(&comm, &CostModel::uniform(1.0), CommSemantics::default()).unwrap();
    let got = bubble_rate_over_makespan(&timeline, 3).unwrap();
    let expected = 3.0 / 67.0;
    assert!(
        (got - expected).abs() < 1e-9,
        "bubble rate {got} vs {expected}"
    );
    println!("ACCEPTANCE 1 PASS: last-rank bubble rate {got:.9} == (P-1)/(M+P-1) = {expected:.9}");
}

/// Criterion 2: BigMac iteration time equals compute-efficient exactly under
/// zero comm and uniform costs, and is at most W gather durations above it
/// under nonzero comm, for P in {2,4,8}, V in {2,4}, M in {2P,8P,16P}.
#[test]
fn criterion_2_time_equivalence() {
    let w = 3usize;
    for p in [2usize, 4, 8] {
        for v in [2usize, 4] {
            for mult in [2usize, 8, 16] {
                let m = p * mult;
                let config = PipelineConfig::new(p, m, v, w);

                let zero = CostModel::uniform(1.0);
                let tb = run(Strategy::BigMac, config, false, &zero).iteration_time;
                let tc = run(Strategy::ComputeEfficient, config, false, &zero).iteration_time;
                assert_eq!(tb, tc, "zero-comm P={p} V={v} M={m}: {tb} vs {tc}");

                let mut comm = CostModel::uniform(1.0);
                comm.bandwidth = 4.0;
                let gather_duration = p as f64 / comm.bandwidth;
                let tb = run(Strategy::BigMac, config, false, &comm).iteration_time;
                let tc = run(Strategy::ComputeEfficient, config, false, &comm).iteration_time;
                assert!(
                    tb <= tc + w as f64 * gather_duration + 1e-9,
                    "nonzero-comm P={p} V={v} M={m}: {tb} vs {tc} + {w} gathers"
                );
            }
        }
    }
    println!(
        "ACCEPTANCE 2 PASS: bigmac == compute_efficient exactly (zero comm) and within W gathers (nonzero comm) on all 18 grid configs"
    );
}

/// Criterion 3: memory laws. (a) compute-efficient entry-stage encoder peak is
/// (M/P)*A_m and doubles with M; (b) memory-efficient entry encoder peak <=
/// P*A_m and second-stage LLM peak <= ((P-1)/P)*A_l plus one per-stage
/// microbatch share of slack; (c) BigMac keeps at most 3 live encoder units
/// and 1 live generator unit per rank, independent of M.
#[test]
fn criterion_3_memory_laws() {
    let footprint = ActivationFootprint::new(1.0, 10.0).unwrap();
    let cost = CostModel::uniform(1.0);

    // (a) compute-efficient scaling in M.
    let mut prev = None;
    for m in [32usize, 64, 128] {
        let config = PipelineConfig::new(4, m, 1, 3);
        let timeline = run(Strategy::ComputeEfficient, config, false, &cost);
        let profile = profile_memory(&timeline, &footprint).unwrap();
        let peak = profile.peak_module(0, MemModule::Encoder);
        let expected = (m / 4) as f64;
        assert_eq!(peak, expected, "CE encoder peak at M={m}");
        if let Some(prev) = prev {
            assert_eq!(peak, 2.0 * prev, "CE encoder peak doubles");
        }
        prev = Some(peak);
    }

    // (b) memory-efficient bounds on the fused single pipeline.
    let config = PipelineConfig::new(4, 64, 1, 3);
    let timeline = run(Strategy::MemoryEfficient, config, true, &cost);
    let profile = profile_memory(&timeline, &footprint).unwrap();
    let enc_peak = profile.peak_module(0, MemModule::Encoder);
    assert!(enc_peak <= 4.0, "ME entry encoder peak {enc_peak} <= P*A_m");
    let llm_slack = footprint.llm_microbatch / 4.0;
    let second = profile.peak_module(1, MemModule::Llm);
    let bound = 0.75 * footprint.llm_microbatch;
    assert!(
        second <= bound + llm_slack,
        "ME second-stage LLM peak {second} <= {bound} + slack"
    );

    // (c) BigMac windows constant in M: exactly the warmup depth of encoder
    // units and one generator unit, per rank.
    for m in [32usize, 64, 128] {
        let config = PipelineConfig::new(4, m, 2, 3);
        let timeline = run(Strategy::BigMac, config, true, &cost);
        let profile = profile_memory(&timeline, &footprint).unwrap();
        assert_eq!(profile.peak_encoder_units, 3, "M={m}");
        assert_eq!(profile.peak_generator_units, 1, "M={m}");
    }
    println!(
        "ACCEPTANCE 3 PASS: CE peak = (M/P)*A_m and doubles with M; ME peaks bounded by P*A_m and ((P-1)/P)*A_l; BigMac windows <= 3 encoder / 1 generator units for all M"
    );
}

/// Criterion 4: the unit order relation holds on every BigMac schedule with
/// V >= 2 in the grid, and a mutation pushing unit 0's gradient point past the
/// entry forward of unit 3 is detected.
#[test]
fn criterion_4_order_property() {
    for p in [2usize, 4, 8] {
        for v in [2usize, 4] {
            for mult in [2usize, 8, 16] {
                let m = p * mult;
                let config = PipelineConfig::new(p, m, v, 3);
                let schedule =
                    build_strategy(Strategy::BigMac, config, full_placement(&config, true))
                        .unwrap();
                let report = verify_order_property(&schedule);
                assert!(
                    report.all_pass(),
                    "P={p} V={v} M={m}: first violation {:?}",
                    report.first_violation
                );
            }
        }
    }

    // Mutation: move G_0 (the entry backward completing unit 0) after F_3.
    let config = PipelineConfig::new(4, 64, 2, 3);
    let mut schedule =
        build_strategy(Strategy::BigMac, config, full_placement(&config, true)).unwrap();
    let unit_size = config.unit_size();
    let rank0 = &mut schedule.per_rank[0];
    let g0 = rank0
        .iter()
        .position(|o| {
            o.kind == OperatorKind::LlmBwd
                && o.chunk == Some(0)
                && o.microbatch == Some(unit_size - 1)
        })
        .unwrap();
    let f3 = rank0
        .iter()
        .position(|o| {
            o.kind == OperatorKind::LlmFwd
                && o.chunk == Some(0)
                && o.microbatch == Some(3 * unit_size)
        })
        .unwrap();
    assert!(g0 < f3);
    let op = rank0.remove(g0);
    rank0.insert(f3, op);
    let report = verify_order_property(&schedule);
    assert_eq!(report.first_violation, Some(0), "mutation must fail unit 0");
    println!(
        "ACCEPTANCE 4 PASS: order relation holds on all V>=2 grid configs; G_0-past-F_3 mutation detected at unit 0"
    );
}

/// Criterion 5: with per-microbatch bimodal encoder costs (1 or 3 units,
/// shared within each scheduling unit, seed-fixed), memory-efficient is
/// strictly slower than BigMac, and BigMac exactly matches compute-efficient.
#[test]
fn criterion_5_interference_direction() {
    let config = PipelineConfig::new(4, 64, 2, 3);
    let bimodal = |seed: u64| DurationSpec::BimodalPerUnit {
        low: 1.0,
        high: 3.0,
        high_prob: 0.5,
        seed,
        unit_size: config.unit_size(),
    };
    let mut cost = CostModel::uniform(1.0);
    cost.enc_fwd = bimodal(17);
    cost.enc_bwd = Some(bimodal(18));

    let tb = run(Strategy::BigMac, config, false, &cost).iteration_time;
    let tc = run(Strategy::ComputeEfficient, config, false, &cost).iteration_time;
    let tm = run(Strategy::MemoryEfficient, config, false, &cost).iteration_time;
    assert!(tm > tb, "memory-efficient {tm} must exceed bigmac {tb}");
    assert_eq!(tb, tc, "bigmac {tb} must equal compute-efficient {tc}");
    println!(
        "ACCEPTANCE 5 PASS: memory_efficient {tm} > bigmac {tb} == compute_efficient {tc} under bimodal encoder costs"
    );
}

/// Criterion 6: micro-executor gradients for all three strategies match the
/// sequential oracle within 1e-9 absolute, double precision, on 20 seeded
/// workloads with P <= 4, V <= 2, M <= 16.
#[test]
fn criterion_6_training_semantics() {
    let shapes = [(1usize, 1usize), (2, 1), (2, 2), (4, 1), (4, 2)];
    let mut worst: f64 = 0.0;
    for case in 0..20u64 {
        let (p, v) = shapes[case as usize % shapes.len()];
        let mult = [1usize, 2, 4][case as usize % 3];
        let m = (p * mult).min(16);
        let config = PipelineConfig::new(p, m, v, 3);
        let model = ToyModel::seeded(1000 + case, 3, 4, config.logical_stages());
        let workload = Workload::seeded(2000 + case, m, 3);
        let reference = sequential_reference(&model, &workload, true);
        for strategy in Strategy::ALL {
            let schedule = build_strategy(strategy, config, full_placement(&config, true)).unwrap();
            let out = execute_numeric(&schedule, &model, &workload).unwrap();
            let diff = out.grads.max_abs_diff(&reference.grads);
            worst = worst.max(diff);
            assert!(
                diff <= 1e-9,
                "case {case} {strategy} P={p} V={v} M={m}: gradient diff {diff}"
            );
        }
    }
    println!(
        "ACCEPTANCE 6 PASS: 20 seeded workloads x 3 strategies match the sequential oracle; worst gradient diff {worst:.3e} <= 1e-9"
    );
}

/// Criterion 7: 1000 randomized valid schedules pass the deadlock checker;
/// 100 fault-injected schedules with forced circular rendezvous waits all
/// produce a concrete cycle report.
#[test]
fn criterion_7_deadlock_checker_soundness() {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);

    let mut checked = 0usize;
    while checked < 1000 {
        let p = [1usize, 2, 4][rng.gen_range(0..3)];
        let v = [1usize, 2][rng.gen_range(0..2)];
        let m = p * [1usize, 2, 4][rng.gen_range(0..3)];
        let gen = rng.gen_bool(0.5);
        let strategy = Strategy::ALL[rng.gen_range(0..3)];
        let config = PipelineConfig::new(p, m, v, 3);
        let schedule = build_strategy(strategy, config, full_placement(&config, gen)).unwrap();
        let wired = insert_comm_ops(&schedule, &PayloadBytes::default()).unwrap();
        let report = deadlock_check(&wired, CommSemantics::default()).unwrap();
        assert!(report.is_ok(), "valid schedule flagged: {report}");
        checked += 1;
    }

    // Fault injection: pick a forward send/recv pair between adjacent ranks
    // and hoist the receiver's Recv to the front of its list while moving the
    // sender's Send behind its own Recvs. Under rendezvous semantics the two
    // ranks then wait on each other.
    let mut cycles = 0usize;
    let mut attempts = 0usize;
    while cycles < 100 {
        attempts += 1;
        assert!(attempts < 1000, "fault injection failed to build cases");
        let p = [2usize, 4][rng.gen_range(0..2)];
        let m = p * [2usize, 4][rng.gen_range(0..2)];
        let config = PipelineConfig::new(p, m, 1, 3);
        let schedule =
            build_strategy(Strategy::BigMac, config, full_placement(&config, false)).unwrap();
        let mut wired = insert_comm_ops(&schedule, &PayloadBytes::default()).unwrap();

        // Swap a matched Send before the Recv it crosses on both ranks.
        let a = rng.gen_range(0..p - 1);
        let b = a + 1;
        let send_pos = wired.per_rank[a]
            .iter()
            .position(|o| o.kind == OperatorKind::Send && o.peer == Some(b))
            .unwrap();
        let recv_pos = wired.per_rank[a]
            .iter()
            .position(|o| o.kind == OperatorKind::Recv && o.peer == Some(b))
            .unwrap();
        // Force rank a to wait for rank b's send before its own send.
        if recv_pos > send_pos {
            let recv = wired.per_rank[a].remove(recv_pos);
            wired.per_rank[a].insert(send_pos, recv);
        }
        let send_pos_b = wired.per_rank[b]
            .iter()
            .position(|o| o.kind == OperatorKind::Send && o.peer == Some(a))
            .unwrap();
        let recv_pos_b = wired.per_rank[b]
            .iter()
            .position(|o| o.kind == OperatorKind::Recv && o.peer == Some(a))
            .unwrap();
        if recv_pos_b > send_pos_b {
            let recv = wired.per_rank[b].remove(recv_pos_b);
            wired.per_rank[b].insert(send_pos_b, recv);
        }

        let report = deadlock_check(
            &wired,
            CommSemantics {
                rendezvous: true,
                buffer_limit: None,
            },
        )
        .unwrap();
        match report {
            DeadlockReport::Cycle(ops) => {
                assert!(ops.len() >= 2, "cycle must be concrete");
                cycles += 1;
            }
            other => panic!("fault-injected schedule produced {other}"),
        }
    }
    println!(
        "ACCEPTANCE 7 PASS: 1000 randomized valid schedules ok; {cycles}/100 forced rendezvous faults reported concrete cycles"
    );
}

/// Criterion 8: cp_unit_size(4,2,1) = 8, and one-sided FSDP iteration time
/// never exceeds collective FSDP on a 50-case seeded jitter suite.
#[test]
fn criterion_8_cp_and_fsdp() {
    assert_eq!(cp_unit_size(4, 2, 1).unwrap(), 8);

    let mut dominated = 0usize;
    for seed in 0..50u64 {
        let config = PipelineConfig::new(4, 32, 2, 3);
        let placement = full_placement(&config, false);
        let schedule = build_strategy(Strategy::BigMac, config, placement).unwrap();
        let jitter = DurationSpec::Uniform {
            low: 1.0,
            high: 2.0,
            seed: 90 + seed,
        };
        let mut cost = CostModel::uniform(1.0);
        cost.llm_fwd = jitter.clone();
        cost.llm_bwd = Some(DurationSpec::Uniform {
            low: 1.0,
            high: 2.0,
            seed: 990 + seed,
        });
        cost.fsdp_pull = 0.5;
        cost.fsdp_gather = 0.5;

        let mut times = Vec::new();
        for mode in [FsdpMode::OneSided, FsdpMode::Collective] {
            let decorated = decorate_fsdp(&schedule, mode).unwrap();
            let wired = insert_comm_ops(&decorated, &PayloadBytes::default()).unwrap();
            assert!(deadlock_check(&wired, CommSemantics::default())
                .unwrap()
                .is_ok());
            times.push(
                simulate(&wired, &cost, CommSemantics::default())
                    .unwrap()
                    .iteration_time,
            );
        }
        assert!(
            times[0] <= times[1] + 1e-9,
            "seed {seed}: one_sided {} > collective {}",
            times[0],
            times[1]
        );
        dominated += 1;
    }
    println!(
        "ACCEPTANCE 8 PASS: cp_unit_size(4,2,1) = 8; one_sided <= collective on {dominated}/50 jittered cost models"
    );
}
