mod common;

use common::Rng;
use drcc::ac_model::{
    fixed_point_solve, pf_solve, quadratic_residuals, respond, response_jacobian, AcControls, AcNetwork, AcRows,
    FixedPointOptions, PfOptions, QuadraticFormModel,
};
use drcc::ambiguity::AmbiguityParams;
use drcc::case_io::{build_fleet, load_case, parse_matpower, to_network, NetworkCase, NetworkOptions, VreFleet};
use drcc::dc_model::{assemble_cc_system, build_ptdf, CcOptions};
use drcc::scenarios::{sample, GaussianSpec};
use nalgebra::DVector;

fn case14() -> NetworkCase {
    let raw = load_case("bundled:case14").unwrap();
    to_network(&raw, &NetworkOptions { derive_missing_limits: true, ..NetworkOptions::default() }).unwrap()
}

fn fleet14(case: &NetworkCase) -> VreFleet {
    build_fleet(case, &[1, 2], &[0.2, 0.2], 0.1).unwrap()
}

/// Lossless line (x = 0.1) from a 1.0 p.u. slack to a 50 MW / 20 MVAr load.
const TWO_BUS: &str = "
mpc.baseMVA = 100;
mpc.bus = [
1 3 0 0 0 0 1 1 0 230 1 1.1 0.9;
2 1 50 20 0 0 1 1 0 230 1 1.1 0.9;
];
mpc.gen = [
1 0 0 100 -100 1 100 1 200 0 0 0 0 0 0 0 0 0 0 0 0;
];
mpc.branch = [
1 2 0 0.1 0 150 0 0 0 0 1 -360 360;
];
mpc.gencost = [
2 0 0 3 0.01 20 0;
];
";

#[test]
fn two_bus_power_flow_matches_closed_form() {
    let case = to_network(&parse_matpower(TWO_BUS).unwrap(), &NetworkOptions::default()).unwrap();
    let fleet = build_fleet(&case, &[0], &[0.1], 0.0).unwrap();
    let net = AcNetwork::new(&case).unwrap();
    let st = pf_solve(&net, &AcControls::from_case(&net), &fleet, &PfOptions::default()).unwrap();
    // Receiving end: V sinδ = P·x and V cosδ − V² = Q·x with P = 0.5, Q = 0.2.
    // Eliminating δ gives u² − 0.96u + 0.0029 = 0 for u = V².
    let u = (0.96 + (0.96f64 * 0.96 - 4.0 * 0.0029).sqrt()) / 2.0;
    let vm = u.sqrt();
    let delta = (0.05 / vm).asin();
    assert!((st.vm[1] - vm).abs() < 1e-9, "{} vs {vm}", st.vm[1]);
    assert!((st.va[1] + delta).abs() < 1e-9, "{} vs {}", st.va[1], -delta);
    // A lossless line delivers exactly the load.
    assert!((st.p_gen[0] + 0.1 - 0.5).abs() < 1e-9);
    assert!((st.flows[0] - 0.5).abs() < 1e-9 && (st.flows[1] + 0.5).abs() < 1e-9);
}

#[test]
fn case14_power_flow_converges_tightly() {
    let case = case14();
    let net = AcNetwork::new(&case).unwrap();
    let st = pf_solve(&net, &AcControls::from_case(&net), &fleet14(&case), &PfOptions::default()).unwrap();
    assert!(st.mismatch <= 1e-10);
    let s = net.injections(&AcNetwork::voltages(&st.vm, &st.va));
    for i in 0..net.n_bus() {
        assert!((s[i].re - st.p[i]).abs() < 1e-9 && (s[i].im - st.q[i]).abs() < 1e-9);
    }
}

#[test]
fn quadratic_forms_reproduce_polar_quantities() {
    let case = case14();
    let net = AcNetwork::new(&case).unwrap();
    let fleet = fleet14(&case);
    let model = QuadraticFormModel::new(&net);
    let base = pf_solve(&net, &AcControls::from_case(&net), &fleet, &PfOptions::default()).unwrap();
    let mut rng = Rng::new(6);
    for _ in 0..100 {
        // Any voltage vector will do: overwrite the state's derived
        // quantities by the polar formulas and compare.
        let mut st = base.clone();
        st.vm = rng.vector(net.n_bus(), 0.9, 1.1);
        st.va = rng.vector(net.n_bus(), -0.5, 0.5);
        let v = AcNetwork::voltages(&st.vm, &st.va);
        let s = net.injections(&v);
        st.p = s.map(|c| c.re);
        st.q = s.map(|c| c.im);
        st.flows = net.flows(&v);
        let r = quadratic_residuals(&model, &st);
        assert!(r.amax() < 1e-10, "{}", r.amax());
    }
}

#[test]
fn response_jacobian_matches_central_differences() {
    let case = case14();
    let net = AcNetwork::new(&case).unwrap();
    let fleet = fleet14(&case);
    let st = pf_solve(&net, &AcControls::from_case(&net), &fleet, &PfOptions::default()).unwrap();
    let rows = AcRows::new(&net, CcOptions::default());
    let jac = response_jacobian(&net, &st, &fleet, &rows).unwrap();
    let h = 1e-5;
    for u in 0..fleet.len() {
        let mut up = DVector::zeros(fleet.len());
        up[u] = h;
        let sp = respond(&net, &st, &fleet, &up, &PfOptions::default()).unwrap();
        let sm = respond(&net, &st, &fleet, &(-up), &PfOptions::default()).unwrap();
        let fd = (rows.values(&sp) - rows.values(&sm)) / (2.0 * h);
        let scale = fd.amax();
        for r in 0..rows.len() {
            let a = jac.j_matrix[(r, u)];
            let err = (a - fd[r]).abs() / a.abs().max(fd[r].abs()).max(1e-3 * scale);
            assert!(err <= 1e-4, "{}: {a} vs {}", rows.names[r], fd[r]);
        }
    }
}

#[test]
fn zero_error_response_is_the_state_itself() {
    let case = case14();
    let net = AcNetwork::new(&case).unwrap();
    let fleet = fleet14(&case);
    let st = pf_solve(&net, &AcControls::from_case(&net), &fleet, &PfOptions::default()).unwrap();
    let again = respond(&net, &st, &fleet, &DVector::zeros(fleet.len()), &PfOptions::default()).unwrap();
    for (a, b) in [(&st.vm, &again.vm), (&st.va, &again.va), (&st.p_gen, &again.p_gen), (&st.flows, &again.flows)] {
        assert!((a - b).amax() < 1e-10);
    }
}

#[test]
fn flow_sensitivity_approaches_dc_in_the_lossless_flat_limit() {
    let mut case = case14();
    for br in &mut case.branches {
        br.r = 0.0;
        br.b = 0.0;
        br.tap = 1.0;
        br.shift = 0.0;
    }
    for bus in &mut case.buses {
        bus.qd = 0.0;
        bus.gs = 0.0;
        bus.bs = 0.0;
    }
    for g in &mut case.gens {
        g.v_set = 1.0;
    }
    let fleet = fleet14(&case);
    let net = AcNetwork::new(&case).unwrap();
    let st = pf_solve(&net, &AcControls::from_case(&net), &fleet, &PfOptions::default()).unwrap();
    let rows = AcRows::new(&net, CcOptions::default());
    let jac = response_jacobian(&net, &st, &fleet, &rows).unwrap();
    let ptdf = build_ptdf(&case).unwrap();
    let cc = assemble_cc_system(&case, &fleet, &ptdf, CcOptions::default());
    let l = case.n_branch();
    let ac_flow = rows.names.iter().position(|n| n.starts_with("flow")).unwrap();
    let dc_flow = cc.names.iter().position(|n| n.starts_with("flow")).unwrap();
    let scale = cc.sens.rows(dc_flow, l).amax();
    for k in 0..l {
        for u in 0..fleet.len() {
            let (a, d) = (jac.j_matrix[(ac_flow + k, u)], cc.sens[(dc_flow + k, u)]);
            assert!((a - d).abs() <= 0.02 * d.abs().max(0.1 * scale), "branch {k}, unit {u}: {a} vs {d}");
        }
    }
}

#[test]
fn fixed_point_converges_on_case14() {
    let mut case = case14();
    let c2 = [0.0, 0.01, 0.01, 0.01, 0.01];
    let c1 = [20.0, 20.0, 40.0, 40.0, 40.0];
    for (g, gen) in case.gens.iter_mut().enumerate() {
        gen.c2 = c2[g] * 1e4;
        gen.c1 = c1[g] * 100.0;
        gen.c0 = 0.0;
    }
    let fleet = fleet14(&case);
    let net = AcNetwork::new(&case).unwrap();
    let spec = GaussianSpec::new(vec!["bus2".into(), "bus3".into()], vec![0.2, 0.2], 0.05, 0.2, false).unwrap();
    let train = sample(&spec, 100, 7).unwrap();
    let params = AmbiguityParams::from_k(98, 100).unwrap();
    let opts = FixedPointOptions { max_outer: 5, ..FixedPointOptions::default() };
    let fp = fixed_point_solve(&net, &fleet, &train, &params, &AcControls::from_case(&net), &opts).unwrap();
    assert!(fp.iterations <= 5);
    assert!(*fp.distances().last().unwrap() <= 1e-4);
    // Enforced scenarios hold under the full power flow up to linearization error.
    for &j in &fp.selection.enforced {
        let s = respond(&net, &fp.state, &fleet, &train.scenario(j), &PfOptions::default()).unwrap();
        let worst = fp.rows.excess(&s).iter().copied().filter(|v| v.is_finite()).fold(f64::NEG_INFINITY, f64::max);
        assert!(worst < 1e-3, "scenario {j}: excess {worst}");
    }
}
