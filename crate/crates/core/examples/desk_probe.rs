//! Calibration probe for the desk-scale training run (not part of tests).

use ndarray::ArrayD;
use specns_core::nse_solver::{Bc, Discretization, Mesh, SolverConfig, Stepper, TimeField};
use specns_core::operator_net::ConvSpec;
use specns_core::problems::{self, gen_initial_2d, InputFamily, RandomInputSpec, TrajectorySample};
use specns_core::trainer::{net_input_at, train_sequential, NetInput, TrainSample, TrainSchedule, TrainSetup};

struct FixedForcing2D;
impl TimeField for FixedForcing2D {
    fn components(&self) -> usize { 2 }
    fn eval(&self, _t: f64, mesh: &Mesh) -> Vec<ArrayD<f64>> {
        let x = &mesh.points[0];
        let y = &mesh.points[1];
        let f = ndarray::Zip::from(x).and(y).map_collect(|&a, &b| a.sin() * b.sin()).into_dyn();
        vec![f.clone(), f]
    }
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let steps: usize = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(20);
    let forced: bool = args.get(6).map(|s| s.parse().unwrap()).unwrap_or(true);
    let u_iters: usize = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(250);
    let phi_iters: usize = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(120);
    let filters: usize = args.get(4).map(|s| s.parse().unwrap()).unwrap_or(3);
    let kernel: usize = args.get(5).map(|s| s.parse().unwrap()).unwrap_or(9);

    let n = 16;
    let cfg = SolverConfig { dim: 2, bc: Bc::Periodic, n_modes: n, nu: 0.01, dt: 0.01, steps, dealias: false };
    let disc = Discretization::new(cfg).unwrap();
    let spec = RandomInputSpec::new(InputFamily::Initial2D, 5.0, 42, 8);
    let samples_in = gen_initial_2d(&spec);
    let fixed = FixedForcing2D;
    let zero = specns_core::nse_solver::ZeroField(2);
    let forcing: &dyn TimeField = if forced { &fixed } else { &zero };
    let setup = TrainSetup {
        disc: &disc,
        samples: samples_in
            .iter()
            .map(|s| TrainSample {
                forcing,
                u0: s,
                net_input: NetInput::Broadcast(net_input_at(&disc, s, 0.0)),
                lifting: None,
            })
            .collect(),
        u_conv: ConvSpec::new(2, filters, kernel, vec![n, n]),
        phi_conv: ConvSpec::new(1, filters, kernel, vec![n, n]),
    };
    let mut schedule = TrainSchedule::new(10, steps, 42);
    schedule.u_iterations = u_iters;
    schedule.phi_iterations = phi_iters;
    let t0 = std::time::Instant::now();
    let out = train_sequential(&setup, &schedule).unwrap();
    let train_secs = t0.elapsed().as_secs_f64();

    // Oracle comparison.
    let mut reports = Vec::new();
    for (s, sample) in samples_in.iter().enumerate() {
        let stepper = Stepper::new(&disc, forcing);
        let oracle = stepper.run_collect(sample, None).unwrap();
        let pred: Vec<TrajectorySample> = out.predicted[s]
            .iter()
            .map(|st| TrajectorySample { time: st.time, velocity: st.u_nodal.clone(), pressure_grad: None })
            .collect();
        let refr: Vec<TrajectorySample> = oracle
            .iter()
            .map(|st| TrajectorySample { time: st.time, velocity: st.u_nodal.clone(), pressure_grad: None })
            .collect();
        reports.push(problems::rel_errors(&pred, &refr, &disc.vel_tables));
    }
    let mean_tx: f64 = reports.iter().map(|r| r.mean_rel_l2_tx()).sum::<f64>() / reports.len() as f64;
    let at = |t: f64| reports.iter().map(|r| r.rel_l2_x_at(t)).sum::<f64>() / reports.len() as f64;
    println!("steps={steps} u_iters={u_iters} phi_iters={phi_iters} filters={filters} kernel={kernel}");
    println!("train time: {train_secs:.1}s");
    println!("mean Rel.L2_tx = {mean_tx:.4e}");
    let t_end = disc.cfg.dt * steps as f64;
    println!("Rel.L2_x(t=0.2T) = {:.4e}  Rel.L2_x(T) = {:.4e}", at(0.2 * t_end / 1.0_f64.min(t_end).max(t_end*0.0+0.2*t_end/ (0.2*t_end)) * (0.2*t_end)/(0.2*t_end)), at(t_end));
    // simpler:
    println!("Rel.L2_x(0.2)={:.4e} Rel.L2_x(1.0)={:.4e}", at(0.2), at(1.0));
    // Error curve and reference amplitude every 10 steps.
    let r0 = &reports[0];
    for (i, t) in r0.times.iter().enumerate() {
        if (i + 1) % 10 == 0 || i == 0 {
            let mean_err: f64 = reports.iter().map(|r| r.rel_l2_x.iter().map(|c| c[i]).sum::<f64>() / r.rel_l2_x.len() as f64).sum::<f64>() / reports.len() as f64;
            println!("t={t:.2} mean_rel_l2_x={mean_err:.4e}");
        }
    }
    // Final loss per step for both phases.
    let mut last_by_step: std::collections::BTreeMap<(usize, String), (f64, usize)> = Default::default();
    for row in &out.log.rows {
        last_by_step.insert((row.step, format!("{}", row.phase)), (row.loss, row.iteration));
    }
    for ((step, phase), (loss, iters)) in &last_by_step {
        if step % 10 == 0 || *step < 12 {
            println!("step {step} phase {phase}: final loss {loss:.3e} after {iters} iters");
        }
    }
    let final_loss_rows: Vec<_> = out.log.rows.iter().filter(|r| r.phase == specns_core::trainer::Phase::U).collect();
    if let Some(last) = final_loss_rows.last() {
        println!("last u-phase loss {:.3e}", last.loss);
    }

    // Generalization: inference on fresh sigma=9 inputs vs the oracle.
    for (sig, seed) in [(5.0, 777u64), (9.0, 777u64)] {
        let test_spec = RandomInputSpec::new(InputFamily::Initial2D, sig, seed, 8);
        let test_in = gen_initial_2d(&test_spec);
        let test_setup = TrainSetup {
            disc: &disc,
            samples: test_in
                .iter()
                .map(|s| TrainSample {
                    forcing,
                    u0: s,
                    net_input: NetInput::Broadcast(net_input_at(&disc, s, 0.0)),
                    lifting: None,
                })
                .collect(),
            u_conv: ConvSpec::new(2, filters, kernel, vec![n, n]),
            phi_conv: ConvSpec::new(1, filters, kernel, vec![n, n]),
        };
        let predicted = specns_core::trainer::infer(&test_setup, &out.blocks, schedule.block_size).unwrap();
        let mut errs = Vec::new();
        for (s, sample) in test_in.iter().enumerate() {
            let stepper = Stepper::new(&disc, forcing);
            let oracle = stepper.run_collect(sample, None).unwrap();
            let pred: Vec<TrajectorySample> = predicted[s]
                .iter()
                .map(|st| TrajectorySample { time: st.time, velocity: st.u_nodal.clone(), pressure_grad: None })
                .collect();
            let refr: Vec<TrajectorySample> = oracle
                .iter()
                .map(|st| TrajectorySample { time: st.time, velocity: st.u_nodal.clone(), pressure_grad: None })
                .collect();
            errs.push(problems::rel_errors(&pred, &refr, &disc.vel_tables).mean_rel_l2_tx());
        }
        let mean: f64 = errs.iter().sum::<f64>() / errs.len() as f64;
        println!("inference sigma={sig}: mean Rel.L2_tx = {mean:.4e}");
    }
}
