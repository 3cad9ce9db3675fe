use dapnet::gradcheck::DEFAULT_TOL;
use dapnet::verify::{check_model, check_op, tiny_dap_config, OP_TRIALS};
use dapnet::{Model, OpKind, Tape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn every_differentiable_op_matches_central_differences() {
    let mut failures = Vec::new();
    for (i, op) in OpKind::DIFFERENTIABLE.into_iter().enumerate() {
        let r = check_op(op, OP_TRIALS, 100 + i as u64, None).unwrap();
        assert!(r.checked > 0, "{}: nothing checked", op.name());
        if r.max_rel_err() > DEFAULT_TOL {
            failures.push(format!("{} {:?}", op.name(), r.worst));
        }
    }
    assert!(failures.is_empty(), "{failures:#?}");
}

#[test]
fn mul_on_a_random_pair_is_tight() {
    let r = check_op(OpKind::Mul, 1, 7, None).unwrap();
    assert!(r.max_rel_err() <= 1e-6, "{:?}", r.worst);
}

#[test]
fn whole_model_matches_central_differences() {
    for seed in 0..3 {
        let mut model = Model::<f64>::new(&tiny_dap_config(), seed).unwrap();
        assert_eq!(model.head.num_heads(), 4);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::<f64>::randn(&[1, 1, 4, 4], 1.0, &mut rng);
        let r = check_model(&mut model, &x, &[(seed % 2) as usize], None).unwrap();
        let worst = r.worst.unwrap();
        assert!(worst.rel_err <= DEFAULT_TOL, "seed {seed}: {worst:?}");
    }
}

#[test]
fn a_flipped_backward_rule_is_caught_by_its_own_check() {
    for (i, op) in OpKind::DIFFERENTIABLE.into_iter().enumerate() {
        let r = check_op(op, OP_TRIALS, 100 + i as u64, Some(op)).unwrap();
        assert!(r.max_rel_err() > DEFAULT_TOL, "flipping {} went unnoticed", op.name());
        // Every other check reduces through mul and sum.
        if matches!(op, OpKind::Mul | OpKind::Sum) {
            continue;
        }
        for other in [OpKind::MatMul, OpKind::Relu] {
            if other != op {
                let r = check_op(other, 4, 1, Some(op)).unwrap();
                assert!(r.max_rel_err() <= DEFAULT_TOL, "flipping {} broke {}", op.name(), other.name());
            }
        }
    }
}

#[test]
fn backward_is_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let model = Model::<f64>::new(&tiny_dap_config(), 3).unwrap();
    let x = Tensor::<f64>::randn(&[2, 1, 4, 4], 1.0, &mut rng);
    let mut tape = Tape::new();
    let (out, _) = model.forward_train(&mut tape, &x, &[0, 1]).unwrap();
    let a = tape.backward(out.routed).unwrap();
    let b = tape.backward(out.routed).unwrap();
    for &(v, _) in tape.param_leaves() {
        let (ga, gb) = (a.wrt(&tape, v), b.wrt(&tape, v));
        assert!(ga.data().iter().zip(gb.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
    }
}
