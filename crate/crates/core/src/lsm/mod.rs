//! Linear sequence modeling kernels.
//!
//! Every instance shares the recurrence `M_s = Θ_s ⋄ M_{s−1} + M̂_s` with
//! output `o_s = φ(q_s)·M_s`, optionally divided by `φ(q_s)·z_s`. Two
//! evaluation orders are provided: [`lsm_forward_sequential`] folds
//! [`recurrent_step`] in plain `f64` and serves as the reference, and
//! [`lsm_forward_chunked`] runs block-parallel on the autodiff tape.

mod chunked;
mod recurrent;
mod spec;

pub use chunked::{
    causal_mask, lsm_chunked_segments, lsm_chunked_var, lsm_forward_chunked, lsm_forward_chunked_with, lsm_readout,
    state_transfer,
    state_width, ChunkOptions, Fault, LsmVars, Transfer,
};
pub use recurrent::{
    lsm_forward_sequential, lsm_forward_sequential_from, recurrent_step, LsmInputs, MemoryState, StepInputs,
    NORMALIZER_FLOOR,
};
pub use spec::{
    feature_map, preset_decay, FeatureMap, GateLayout, GateSet, GateShape, Instance, LsmSpec, OuterPreset,
    ScalarPreset,
};

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradcheck::check_gradients;
    use crate::error::Error;
    use crate::rng::Rng;
    use crate::tensor::Tensor;

    fn step(q: &[f64], k: &[f64], v: &[f64]) -> StepInputs {
        StepInputs { q: q.to_vec(), k: k.to_vec(), v: v.to_vec(), gates: GateSet::default() }
    }

    fn plain(inst: Instance, d: usize) -> LsmSpec {
        LsmSpec::new(inst, d, d).with_feature_map(FeatureMap::Identity).with_normalizer(false)
    }

    #[test]
    fn bla_single_outer_product() {
        let spec = plain(Instance::Bla, 2);
        let (s1, _) = recurrent_step(&MemoryState::new(&spec), &step(&[0.0, 0.0], &[1.0, 0.0], &[0.0, 1.0]), &spec).unwrap();
        assert_eq!(s1.m.data(), &[0.0, 1.0, 0.0, 0.0]);
        assert_eq!(s1.step, 1);

        let decay = plain(Instance::ScalarDecay(ScalarPreset::RetNet), 2).with_scalar_decay(0.5);
        let (s2, _) = recurrent_step(&s1, &step(&[0.0; 2], &[0.0; 2], &[0.0; 2]), &decay).unwrap();
        assert_eq!(s2.m.data(), &[0.0, 0.5, 0.0, 0.0]);
    }

    fn trajectory(inputs: &LsmInputs, spec: &LsmSpec) -> Vec<Tensor> {
        let mut s = MemoryState::new(spec);
        (0..inputs.len())
            .map(|t| {
                s = recurrent_step(&s, &inputs.step(t, spec), spec).unwrap().0;
                s.m.clone()
            })
            .collect()
    }

    #[test]
    fn unit_gates_reduce_to_bla() {
        let mut rng = Rng::seed(3);
        let bla = plain(Instance::Bla, 3);
        let base = LsmInputs::random(&bla, 6, &mut rng);
        let want = trajectory(&base, &bla);

        let gla = plain(Instance::Gla, 3);
        let mut x = base.clone();
        x.gates.decay = Some(Tensor::full(&[6, 3], 40.0));
        assert_eq!(trajectory(&x, &gla), want);

        let sd = plain(Instance::ScalarDecay(ScalarPreset::Lightning), 3).with_scalar_decay(1.0);
        assert_eq!(trajectory(&base, &sd), want);
    }

    #[test]
    fn mamba2_decay_tends_to_one_as_a_vanishes() {
        let spec = plain(Instance::Mamba2, 2);
        let s0 = MemoryState { m: Tensor::ones(&[2, 2]), z: None, step: 0 };
        let mut prev = 0.0;
        for log_a in [0.0, -5.0, -20.0] {
            let mut inp = step(&[1.0, 0.0], &[0.0, 0.0], &[0.0, 0.0]);
            inp.gates.rate = Some(vec![0.0]);
            inp.gates.transition = Some(vec![log_a]);
            let (s, _) = recurrent_step(&s0, &inp, &spec).unwrap();
            let factor = s.m.data()[0];
            assert!(factor > prev && factor <= 1.0);
            prev = factor;
        }
        assert!(1.0 - prev < 1e-8);
    }

    #[test]
    fn deltanet_repeated_write_is_exact_projection() {
        let spec = plain(Instance::DeltaNet, 3);
        let k = [0.6, 0.0, 0.8];
        let v = [1.0, -2.0, 0.5];
        let mut inp = step(&k, &k, &v);
        inp.gates.decay = Some(vec![40.0]);
        inp.gates.rate = Some(vec![0.3]);
        let b = crate::autodiff::sigmoid(0.3);
        let (s1, o1) = recurrent_step(&MemoryState::new(&spec), &inp, &spec).unwrap();
        for j in 0..3 {
            assert!((o1[j] - b * v[j]).abs() < 1e-12);
        }
        // a = 1 erases the old binding fully, so kM = b·v again.
        let (_, o2) = recurrent_step(&s1, &inp, &spec).unwrap();
        for j in 0..3 {
            assert!((o2[j] - b * v[j]).abs() < 1e-12);
        }
    }

    #[test]
    fn ttt_step_is_descent_on_squared_error() {
        let spec = plain(Instance::Ttt, 2);
        let m0 = Tensor::from_rows(&[&[0.3, -0.2], &[0.1, 0.4]]).unwrap();
        let s0 = MemoryState { m: m0.clone(), z: None, step: 0 };
        let k = [0.8, -0.6];
        let v = [0.5, 1.0];
        let mut inp = step(&[1.0, 0.0], &k, &v);
        inp.gates.rate = Some(vec![0.2]);
        let (s1, _) = recurrent_step(&s0, &inp, &spec).unwrap();

        let loss = |m: &Tensor| {
            let r: Vec<f64> = (0..2).map(|j| k[0] * m.at(0, j) + k[1] * m.at(1, j) - v[j]).collect();
            Ok(Tensor::scalar(0.5 * r.iter().map(|x| x * x).sum::<f64>()))
        };
        let grad = crate::autodiff::gradcheck::finite_diff_grad(loss, &m0, 1e-6).unwrap();
        let eta = crate::autodiff::sigmoid(0.2);
        let want = m0.sub(&grad.scale(eta)).unwrap();
        assert!(s1.m.max_abs_diff(&want).unwrap() < 1e-9);
    }

    #[test]
    fn single_token_examples() {
        let mut rng = Rng::seed(8);
        let spec = LsmSpec::new(Instance::Bla, 4, 3);
        assert!(spec.use_normalizer && spec.feature_map.is_positive());
        let x = LsmInputs::random(&spec, 1, &mut rng);
        let o = lsm_forward_sequential(&x, &spec).unwrap();
        assert!(o.max_abs_diff(&x.v).unwrap() < 1e-12);

        let spec = spec.with_normalizer(false);
        let o = lsm_forward_sequential(&x, &spec).unwrap();
        let phi = |t: &Tensor| feature_map(t.data(), FeatureMap::EluPlusOne);
        let score: f64 = phi(&x.q).iter().zip(phi(&x.k)).map(|(a, b)| a * b).sum();
        assert!(o.max_abs_diff(&x.v.scale(score)).unwrap() < 1e-12);
    }

    #[test]
    fn degenerate_normalizer_is_reported() {
        let spec = LsmSpec::new(Instance::Bla, 2, 2).with_feature_map(FeatureMap::Identity);
        let err = recurrent_step(&MemoryState::new(&spec), &step(&[1.0, 0.0], &[0.0, 1.0], &[1.0, 1.0]), &spec).unwrap_err();
        assert!(matches!(err, Error::DegenerateNormalizer { .. }), "{err}");
        let x = LsmInputs {
            q: Tensor::row(&[1.0, 0.0]),
            k: Tensor::row(&[0.0, 1.0]),
            v: Tensor::row(&[1.0, 1.0]),
            gates: GateSet::default(),
        };
        assert!(matches!(lsm_forward_chunked(&x, &spec, 1), Err(Error::DegenerateNormalizer { .. })));
    }

    #[test]
    fn causal_mask_examples() {
        assert_eq!(causal_mask(1).data(), &[1.0]);
        assert_eq!(causal_mask(2).data(), &[1.0, 0.0, 1.0, 1.0]);
        let m = causal_mask(3);
        let sums: Vec<f64> = (0..3).map(|i| m.row_slice(i).iter().sum()).collect();
        assert_eq!(sums, vec![1.0, 2.0, 3.0]);
    }

    #[test]
    fn chunk_size_zero_rejected() {
        let spec = LsmSpec::new(Instance::Bla, 2, 2);
        let x = LsmInputs::random(&spec, 3, &mut Rng::seed(1));
        assert!(lsm_forward_chunked(&x, &spec, 0).is_err());
    }

    #[test]
    fn chunked_matches_sequential_for_every_instance() {
        let mut rng = Rng::seed(21);
        for inst in Instance::ALL {
            for (dk, dv) in [(3, 2), (4, 4)] {
                let spec = LsmSpec::new(inst, dk, dv);
                let x = LsmInputs::random(&spec, 11, &mut rng);
                let want = lsm_forward_sequential(&x, &spec).unwrap();
                for c in [1, 3, 4, 11, 20] {
                    let got = lsm_forward_chunked(&x, &spec, c).unwrap();
                    let err = got.max_abs_diff(&want).unwrap();
                    assert!(err < 1e-10, "{inst} dk={dk} c={c}: {err}");
                }
            }
        }
    }

    #[test]
    fn chunked_final_state_and_continuation_match() {
        let mut rng = Rng::seed(4);
        for inst in Instance::ALL {
            let spec = LsmSpec::new(inst, 3, 3);
            let x = LsmInputs::random(&spec, 9, &mut rng);
            let (want_o, want_s) = lsm_forward_sequential_from(&x, &spec, MemoryState::new(&spec)).unwrap();
            let (a, sa) = lsm_forward_chunked_with(&x.slice(0, 4, &spec).unwrap(), &spec, &ChunkOptions::new(2), None).unwrap();
            let (b, sb) =
                lsm_forward_chunked_with(&x.slice(4, 9, &spec).unwrap(), &spec, &ChunkOptions::new(3), Some(&sa)).unwrap();
            let got = Tensor::concat_rows(&[a, b]).unwrap();
            assert!(got.max_abs_diff(&want_o).unwrap() < 1e-10, "{inst}");
            assert!(sb.m.max_abs_diff(&want_s.m).unwrap() < 1e-10, "{inst}");
            assert_eq!(sb.step, 9);
        }
    }

    #[test]
    fn transfer_reproduces_carried_state() {
        let mut rng = Rng::seed(12);
        for inst in Instance::ALL {
            let spec = LsmSpec::new(inst, 3, 2);
            let x = LsmInputs::random(&spec, 5, &mut rng);
            let init = Tensor::uniform(&[3, state_width(&spec)], -1.0, 1.0, &mut rng);
            let tape = crate::autodiff::Tape::new();
            let vars = LsmVars::bind(&tape, &x, false);
            let opts = ChunkOptions::new(2);
            let (_, from_init) = lsm_chunked_var(&tape, &vars, &spec, &opts, Some(tape.constant(init.clone()))).unwrap();
            let (_, from_zero) = lsm_chunked_var(&tape, &vars, &spec, &opts, None).unwrap();
            let t = state_transfer(&tape, &vars, &spec, &[]).unwrap();
            let got = t.apply(&tape, tape.constant(init)).unwrap().add(from_zero).unwrap();
            assert!(got.value().max_abs_diff(&from_init.value()).unwrap() < 1e-12, "{inst}");
        }
    }

    #[test]
    fn segments_restart_state() {
        let mut rng = Rng::seed(5);
        let spec = LsmSpec::new(Instance::Gla, 3, 3);
        let x = LsmInputs::random(&spec, 10, &mut rng);
        let tape = crate::autodiff::Tape::new();
        let vars = LsmVars::bind(&tape, &x, false);
        let (o, _) = lsm_chunked_segments(&tape, &vars, &spec, &ChunkOptions::new(4), None, &[0, 6]).unwrap();
        let a = lsm_forward_sequential(&x.slice(0, 6, &spec).unwrap(), &spec).unwrap();
        let b = lsm_forward_sequential(&x.slice(6, 10, &spec).unwrap(), &spec).unwrap();
        let want = Tensor::concat_rows(&[a, b]).unwrap();
        assert!(o.value().max_abs_diff(&want).unwrap() < 1e-12);
    }

    #[test]
    fn fault_injection_breaks_decayed_instances() {
        let mut rng = Rng::seed(2);
        let spec = LsmSpec::new(Instance::Gla, 4, 4);
        let x = LsmInputs::random(&spec, 16, &mut rng);
        let want = lsm_forward_sequential(&x, &spec).unwrap();
        let opts = ChunkOptions { chunk: 4, fault: Some(Fault::ChunkDecayOffByOne) };
        let (got, _) = lsm_forward_chunked_with(&x, &spec, &opts, None).unwrap();
        assert!(got.max_abs_diff(&want).unwrap() > 1e-3);
    }

    #[test]
    fn zero_inputs_never_grow_the_state() {
        let mut rng = Rng::seed(9);
        for inst in Instance::ALL {
            let spec = LsmSpec::new(inst, 3, 3).with_normalizer(false);
            let mut x = LsmInputs::random(&spec, 12, &mut rng);
            x.k = Tensor::zeros(&[12, 3]);
            x.v = Tensor::zeros(&[12, 3]);
            if inst == Instance::S4 {
                x.gates.input = Some(Tensor::zeros(&[1, 3]));
            }
            let mut s = MemoryState { m: Tensor::uniform(&[3, 3], -1.0, 1.0, &mut rng), z: None, step: 0 };
            let mut norm = s.m.data().iter().map(|v| v * v).sum::<f64>();
            for t in 0..12 {
                s = recurrent_step(&s, &x.step(t, &spec), &spec).unwrap().0;
                let next = s.m.data().iter().map(|v| v * v).sum::<f64>();
                assert!(next <= norm + 1e-15, "{inst} t={t}: {next} > {norm}");
                norm = next;
            }
        }
    }

    #[test]
    fn output_is_linear_in_values() {
        let mut rng = Rng::seed(14);
        for inst in Instance::ALL {
            let spec = LsmSpec::new(inst, 3, 3).with_normalizer(false);
            let x1 = LsmInputs::random(&spec, 8, &mut rng);
            let mut x2 = x1.clone();
            x2.v = Tensor::uniform(&[8, 3], -1.0, 1.0, &mut rng);
            let mut sum = x1.clone();
            sum.v = x1.v.add(&x2.v).unwrap();
            let lhs = lsm_forward_sequential(&sum, &spec).unwrap();
            let rhs = lsm_forward_sequential(&x1, &spec).unwrap().add(&lsm_forward_sequential(&x2, &spec).unwrap()).unwrap();
            assert!(lhs.max_abs_diff(&rhs).unwrap() < 1e-10, "{inst}");
        }
    }

    #[test]
    fn gradients_match_finite_differences_for_every_instance() {
        let mut rng = Rng::seed(31);
        for inst in Instance::ALL {
            let spec = LsmSpec::new(inst, 3, 3);
            let x = LsmInputs::random(&spec, 6, &mut rng);
            let mut inputs = vec![x.q.clone(), x.k.clone(), x.v.clone()];
            let present: Vec<bool> = x.gates.fields().iter().map(|(_, g)| g.is_some()).collect();
            inputs.extend(x.gates.fields().iter().filter_map(|(_, g)| g.cloned()));
            let weights = Tensor::uniform(&[6, 3], -1.0, 1.0, &mut rng);
            let report = check_gradients(&inputs, 1e-6, |tape, v| {
                let mut it = v[3..].iter().copied();
                let mut next = |on: bool| if on { it.next() } else { None };
                let gates = GateSet {
                    decay: next(present[0]),
                    decay_col: next(present[1]),
                    rate: next(present[2]),
                    step: next(present[3]),
                    input: next(present[4]),
                    transition: next(present[5]),
                };
                let vars = LsmVars::new(v[0], v[1], v[2], gates);
                let (o, _) = lsm_chunked_var(tape, &vars, &spec, &ChunkOptions::new(4), None)?;
                o.mul(tape.constant(weights.clone()))?.sum()
            })
            .unwrap();
            assert!(report.max_rel_err < 1e-4, "{inst}: {report:?}");
        }
    }
}
