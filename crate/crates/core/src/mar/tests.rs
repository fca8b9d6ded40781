use super::*;
use crate::autodiff::grad_check;
use crate::data::balanced_sequences;

fn tiny(kind: HeadKind) -> MarConfig {
    MarConfig {
        seq_len: 5,
        hidden: 8,
        attention_heads: 2,
        blocks: 1,
        head: HeadConfig {
            kind,
            width: 6,
            depth: 1,
            ..HeadConfig::default()
        },
        ..MarConfig::default()
    }
}

fn randomize(store: &mut ParamStore, seed: u64, scale: f64) {
    let mut s = Stream::new(seed, "randomize");
    for p in store.iter_mut() {
        let v: Vec<f64> = s.normals(p.tensor.len()).into_iter().map(|x| scale * x).collect();
        p.tensor = Tensor::from_vec(p.tensor.shape(), v);
    }
}

fn data(len: usize) -> Vec<ConditionalSequenceSample> {
    balanced_sequences(4, len, 0.02, 1)
}

#[test]
fn mask_counts_and_determinism() {
    let y = Tensor::zeros(&[16, 2]);
    let (_, p) = apply_mask(&y, 0.75, 0.75, &mut Stream::new(1, "m"));
    assert_eq!(p.count(), 12);
    let (tok, p) = apply_mask(&y.map(|_| 1.0), 0.999, 1.0, &mut Stream::new(1, "m"));
    assert_eq!(p.count(), 16);
    assert!(tok.data().iter().all(|&v| v == 0.0));
    let a = apply_mask(&y, 0.7, 1.0, &mut Stream::new(5, "m"));
    let b = apply_mask(&y, 0.7, 1.0, &mut Stream::new(5, "m"));
    assert_eq!(a, b);
    assert!((0.7..1.0).contains(&a.1.rate));
}

#[test]
fn percent_mask_range_is_normalised() {
    let cfg = MarConfig {
        mask_rate: [70.0, 100.0],
        ..MarConfig::default()
    };
    assert_eq!(cfg.rate_range(), (0.7, 1.0));
    assert!(MarConfig {
        mask_rate: [0.0, 0.5],
        ..MarConfig::default()
    }
    .validate()
    .is_err());
}

#[test]
fn few_step_heads_are_rejected() {
    for kind in [HeadKind::Shortcut, HeadKind::Meanflow] {
        assert!(matches!(MarModel::new(tiny(kind)), Err(MarError::Config(_))));
    }
}

fn input_for(model: &MarModel, seqs: &[ConditionalSequenceSample]) -> BackboneInput {
    let refs: Vec<_> = seqs.iter().collect();
    model.prepare_batch(&refs, &Stream::new(3, "b")).unwrap().input
}

#[test]
fn backbone_shape_determinism_and_conditioning() {
    let model = MarModel::new(tiny(HeadKind::Energy)).unwrap();
    let mut params = model.init(1);
    randomize(&mut params, 2, 0.5);
    let seqs = &data(5)[..3];
    let mut input = input_for(&model, seqs);
    input.conditioning = vec![Conditioning::Null; 3];
    let a = model.representation(&params, &input).unwrap();
    assert_eq!(a.shape(), &[15, 8]);
    assert_eq!(a, model.representation(&params, &input).unwrap());
    input.conditioning[1] = Conditioning::Class(2);
    let b = model.representation(&params, &input).unwrap();
    assert_ne!(a.row(5), b.row(5));
    // Other sequences are unaffected.
    assert_eq!(a.row(0), b.row(0));
    input.conditioning[1] = Conditioning::Class(7);
    assert!(matches!(model.representation(&params, &input), Err(MarError::UnknownClass(7))));
}

#[test]
fn cfg_combine_examples() {
    let c = ContextualRepresentation {
        h: Tensor::matrix(&[&[1.0, 0.0]]),
        origin: Origin::Student,
    };
    let u = ContextualRepresentation {
        h: Tensor::matrix(&[&[0.0, 1.0]]),
        origin: Origin::Student,
    };
    assert_eq!(cfg_combine(&c, &u, 4.0).unwrap().h, Tensor::matrix(&[&[4.0, -3.0]]));
    assert_eq!(cfg_combine(&c, &u, 1.0).unwrap(), c);
    assert_eq!(cfg_combine(&c, &u, 0.0).unwrap(), u);
    let t = ContextualRepresentation {
        origin: Origin::Teacher,
        ..u.clone()
    };
    assert_eq!(cfg_combine(&c, &t, 2.0), Err(MarError::OriginMismatch));
}

#[test]
fn distillation_examples() {
    let a = Tensor::matrix(&[&[3.0]]);
    assert_eq!(distillation_loss(&a, &Tensor::matrix(&[&[1.0]])).unwrap(), 4.0);
    assert_eq!(distillation_loss(&a, &a).unwrap(), 0.0);
    let s = Tensor::matrix(&[&[1.0, 0.0], &[0.0, 2.0]]);
    assert_eq!(distillation_loss(&s, &Tensor::zeros(&[2, 2])).unwrap(), 2.5);
    assert!(distillation_loss(&s, &a).is_err());
}

fn batch_for(model: &MarModel) -> TrainBatch {
    let seqs = data(model.cfg.seq_len);
    let refs: Vec<_> = seqs.iter().take(4).collect();
    model.prepare_batch(&refs, &Stream::new(8, "b")).unwrap()
}

#[test]
fn loss_breakdown_is_consistent() {
    let model = MarModel::new(tiny(HeadKind::Energy)).unwrap();
    let mut student = model.init(1);
    randomize(&mut student, 3, 0.3);
    let mut teacher = model.init(2);
    randomize(&mut teacher, 4, 0.3);
    let batch = batch_for(&model);
    let opt = Adam::default();
    let t = Teacher {
        model: &model,
        params: &teacher,
    };
    for lambda in [0.0, 0.5, 1000.0] {
        let mut p = student.clone();
        let l = model
            .train_step(&mut p, &opt, &batch, Some(t), lambda, 1e-3, 1, &mut Stream::new(1, "h"))
            .unwrap();
        assert!((l.total - (l.energy + l.lambda * l.distill)).abs() <= 1e-12 * l.total.abs().max(1.0));
        assert!(l.distill > 0.0);
        if lambda == 0.0 {
            assert_eq!(l.total, l.energy);
        }
    }
    // Self-distillation.
    let same = Teacher {
        model: &model,
        params: &student,
    };
    let mut p = student.clone();
    let l = model
        .train_step(&mut p, &opt, &batch, Some(same), 10.0, 1e-3, 1, &mut Stream::new(1, "h"))
        .unwrap();
    assert_eq!(l.distill, 0.0);
}

#[test]
fn unmasked_targets_do_not_affect_the_energy_term() {
    let model = MarModel::new(tiny(HeadKind::Energy)).unwrap();
    let mut params = model.init(1);
    randomize(&mut params, 5, 0.3);
    let mut batch = batch_for(&model);
    let energy = |b: &TrainBatch| {
        let lg = model.loss_graph(&params, b, None, 0.0, &mut Stream::new(2, "h")).unwrap();
        evaluate(&lg.graph, &Chain(vec![&params, &lg.bindings])).unwrap().value(lg.energy).item()
    };
    let before = energy(&batch);
    let open = batch.input.mask.data().iter().position(|&m| m == 0.0);
    let masked = batch.input.mask.data().iter().position(|&m| m == 1.0).unwrap();
    if let Some(r) = open {
        batch.targets.data_mut()[2 * r] += 5.0;
        assert_eq!(energy(&batch), before);
    }
    batch.targets.data_mut()[2 * masked] += 5.0;
    assert_ne!(energy(&batch), before);
}

#[test]
fn teacher_is_not_modified_by_student_training() {
    let model = MarModel::new(tiny(HeadKind::Energy)).unwrap();
    let mut teacher = model.init(7);
    randomize(&mut teacher, 8, 0.3);
    let frozen = teacher.clone();
    let sched = MarSchedule {
        steps: 3,
        batch: 4,
        lambda: 1.0,
        ..MarSchedule::default()
    };
    let t = Teacher {
        model: &model,
        params: &teacher,
    };
    let (_, log) = train_mar(&model, &sched, 1, &data(5), Some(t)).unwrap();
    assert_eq!(log.len(), 3);
    assert_eq!(teacher, frozen);
    let text = log_csv(&log);
    assert_eq!(text.lines().next(), Some(LOG_HEADER));
    assert_eq!(text.lines().count(), 4);
}

#[test]
fn student_can_start_from_teacher_backbone() {
    let model = MarModel::new(tiny(HeadKind::Energy)).unwrap();
    let teacher_model = MarModel::new(tiny(HeadKind::Diffusion)).unwrap();
    let teacher = teacher_model.init(9);
    let sched = MarSchedule {
        steps: 0,
        init: StudentInit::Teacher,
        ..MarSchedule::default()
    };
    let t = Teacher {
        model: &teacher_model,
        params: &teacher,
    };
    let (p, _) = train_mar(&model, &sched, 1, &data(5), Some(t)).unwrap();
    assert_eq!(p.get("mar.pos"), teacher.get("mar.pos"));
    assert_ne!(p.get("head.in.weight"), teacher.get("head.in.weight"));
}

#[test]
fn mar_losses_pass_gradient_check() {
    for kind in [HeadKind::Energy, HeadKind::Diffusion, HeadKind::Flow] {
        let model = MarModel::new(tiny(kind)).unwrap();
        let mut params = model.init(1);
        randomize(&mut params, 10, 0.3);
        let mut teacher = model.init(2);
        randomize(&mut teacher, 11, 0.3);
        let batch = batch_for(&model);
        let t = Teacher {
            model: &model,
            params: &teacher,
        };
        let lg = model.loss_graph(&params, &batch, Some(t), 0.7, &mut Stream::new(3, "h")).unwrap();
        let mut point: TensorMap = params.iter().map(|p| (p.name.clone(), p.tensor.clone())).collect();
        point.extend(lg.bindings.clone());
        let err = grad_check(&lg.graph, lg.total, &point, 1e-3).unwrap();
        assert!(err < 1e-5, "{kind}: {err}");
    }
}

#[test]
fn unmask_schedule_covers_every_position() {
    for len in 1..20 {
        for t in 1..=len {
            for s in [UnmaskSchedule::Cosine, UnmaskSchedule::Uniform] {
                let c = unmask_counts(len, t, s).unwrap();
                assert_eq!(c.len(), t);
                assert_eq!(c.iter().sum::<usize>(), len);
                assert!(c.iter().all(|&k| k >= 1));
            }
        }
        assert!(unmask_counts(len, len + 1, UnmaskSchedule::Cosine).is_err());
    }
    assert_eq!(unmask_counts(16, 1, UnmaskSchedule::Cosine).unwrap(), vec![16]);
}

fn decode_model() -> (MarModel, ParamStore) {
    let model = MarModel::new(tiny(HeadKind::Energy)).unwrap();
    let mut params = model.init(1);
    randomize(&mut params, 12, 0.3);
    (model, params)
}

#[test]
fn decode_contracts() {
    let (model, params) = decode_model();
    let reqs: Vec<_> = (0..4).map(|i| (Conditioning::Class(i % 3), i as u64)).collect();
    for t in [1, 3, 5] {
        let dcfg = DecodeConfig {
            iterations: t,
            seed: 4,
            ..DecodeConfig::default()
        };
        let out = model.decode(&params, &reqs, &dcfg).unwrap();
        assert_eq!(out.backbone_forwards, 2 * t);
        assert_eq!(out.head_rows, 4 * 5);
        for i in 0..4 {
            assert!(out.generated[i].iter().all(|&g| g));
            let mut all: Vec<usize> = out.order[i].iter().flatten().copied().collect();
            all.sort();
            assert_eq!(all, (0..5).collect::<Vec<_>>());
            assert_eq!(out.order[i].len(), t);
        }
        assert_eq!(out, model.decode(&params, &reqs, &dcfg).unwrap());
    }
    let too_many = DecodeConfig {
        iterations: 6,
        ..DecodeConfig::default()
    };
    assert!(matches!(
        model.decode(&params, &reqs, &too_many),
        Err(MarError::Iterations { iterations: 6, len: 5 })
    ));
}

#[test]
fn unit_guidance_equals_conditional_decoding() {
    let (model, params) = decode_model();
    let reqs: Vec<_> = (0..3).map(|i| (Conditioning::Class(i), i as u64)).collect();
    let base = DecodeConfig {
        iterations: 3,
        cfg_scale: 1.0,
        seed: 2,
        ..DecodeConfig::default()
    };
    let guided = model.decode(&params, &reqs, &base).unwrap();
    let plain = model
        .decode(&params, &reqs, &DecodeConfig { guidance: false, ..base })
        .unwrap();
    assert_eq!(guided.sequences, plain.sequences);
    assert_eq!(plain.backbone_forwards, 3);
    let strong = model
        .decode(&params, &reqs, &DecodeConfig { cfg_scale: 3.0, ..base })
        .unwrap();
    assert_ne!(strong.sequences, plain.sequences);
}

#[test]
fn batched_decoding_matches_one_at_a_time() {
    let (model, params) = decode_model();
    let reqs: Vec<_> = (0..5).map(|i| (Conditioning::Class(i % 3), 10 + i as u64)).collect();
    let dcfg = DecodeConfig {
        iterations: 4,
        seed: 6,
        ..DecodeConfig::default()
    };
    let all = model.decode(&params, &reqs, &dcfg).unwrap();
    for (i, r) in reqs.iter().enumerate() {
        let one = model.decode(&params, &[*r], &dcfg).unwrap();
        assert_eq!(one.sequences[0], all.sequences[i]);
    }
}

#[test]
fn diffusion_head_decodes_with_its_own_sampler() {
    let model = MarModel::new(tiny(HeadKind::Diffusion)).unwrap();
    let mut params = model.init(1);
    randomize(&mut params, 13, 0.2);
    let dcfg = DecodeConfig {
        iterations: 2,
        head_steps: 10,
        ..DecodeConfig::default()
    };
    let out = model.decode(&params, &[(Conditioning::Class(0), 0)], &dcfg).unwrap();
    assert!(out.sequences[0].is_finite());
}

