use combogait::data::synth::{generate_subject, render_sequence, sequence_rng, RenderOptions, FRAME_HEIGHT, FRAME_WIDTH};
use combogait::data::{
    bin_age, bin_bmi, bmi_from_imperial, generate_dataset, Dataset, GenerateOptions, Manifest, ManifestRow, RangeTag,
    Sex, SilhouetteSequence, SmplSequence, AGE_RANGE, BMI_RANGE, HEIGHT_RANGE_IN, MANIFEST_FILE, SMPL_DIM,
    WEIGHT_RANGE_LB,
};
use combogait::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn binning_examples() {
    assert_eq!(bin_age(18.0).unwrap(), 0);
    assert_eq!(bin_age(85.0).unwrap(), 4);
    assert_eq!(bin_age(20.0).unwrap(), 1);
    assert_eq!(bin_age(59.9).unwrap(), 2);
    assert!(matches!(bin_age(-1.0), Err(Error::Validation(_))));
    assert_eq!(bin_bmi(14.23).unwrap(), 0);
    assert_eq!(bin_bmi(68.65).unwrap(), 3);
    assert_eq!(bin_bmi(25.0).unwrap(), 2);
    assert_eq!(bin_bmi(22.0).unwrap(), 1);
    assert!(matches!(bin_bmi(0.0), Err(Error::Validation(_))));
    assert!((bmi_from_imperial(150.0, 70.0) - 21.52).abs() < 0.005);
}

#[test]
fn thousand_subjects_stay_in_label_ranges() {
    let within = |v: f64, r: (f64, f64)| v >= r.0 && v <= r.1;
    let mut age_classes = [0usize; 5];
    let mut sexes = [0usize; 2];
    for i in 0..1000 {
        let (m, _) = generate_subject(11, i);
        assert!(within(m.age, AGE_RANGE), "{m:?}");
        assert!(within(m.height_in, HEIGHT_RANGE_IN), "{m:?}");
        assert!(within(m.weight_lb, WEIGHT_RANGE_LB), "{m:?}");
        assert!(within(m.bmi, BMI_RANGE), "{m:?}");
        assert_eq!(m.bmi, bmi_from_imperial(m.weight_lb, m.height_in));
        let l = m.labels().unwrap();
        age_classes[l.age] += 1;
        sexes[l.sex] += 1;
    }
    assert!(age_classes.iter().all(|&n| n > 0), "{age_classes:?}");
    assert!(sexes.iter().all(|&n| n > 300), "{sexes:?}");
}

#[test]
fn subject_generation_is_deterministic() {
    assert_eq!(generate_subject(3, 17), generate_subject(3, 17));
    assert_ne!(generate_subject(3, 17).0, generate_subject(4, 17).0);
}

fn mean_foreground(sil: &SilhouetteSequence) -> f64 {
    (0..sil.frames()).map(|t| sil.foreground(t) as f64).sum::<f64>() / sil.frames() as f64
}

#[test]
fn wider_torso_gives_more_foreground() {
    for i in 0..5 {
        let (_, sig) = generate_subject(0, i);
        let mut wide = sig.clone();
        wide.torso_width *= 2.0;
        let opts = RenderOptions::default();
        let (a, _) = render_sequence(&sig, &opts, &mut sequence_rng(0, i, 0));
        let (b, _) = render_sequence(&wide, &opts, &mut sequence_rng(0, i, 0));
        assert!(mean_foreground(&b) > mean_foreground(&a), "subject {i}");
    }
}

#[test]
fn opposite_views_mirror_root_orientation() {
    let (_, sig) = generate_subject(0, 2);
    let front = RenderOptions { view_angle: 0.0, ..RenderOptions::default() };
    let back = RenderOptions { view_angle: std::f64::consts::PI, ..RenderOptions::default() };
    let (_, a) = render_sequence(&sig, &front, &mut sequence_rng(0, 2, 0));
    let (_, b) = render_sequence(&sig, &back, &mut sequence_rng(0, 2, 0));
    let (ra, rb) = (a.root(0), b.root(0));
    assert!(ra[0] > 0.0);
    assert_eq!(ra[0], -rb[0]);
    assert_eq!(ra[1], 0.0);
    assert!((rb[1] - std::f32::consts::PI).abs() < 1e-6);
}

#[test]
fn rendered_shapes_and_alignment() {
    let (_, sig) = generate_subject(5, 0);
    for frames in [1, 7, 30] {
        let opts = RenderOptions { frames, ..RenderOptions::default() };
        let (sil, smpl) = render_sequence(&sig, &opts, &mut sequence_rng(5, 0, 0));
        assert_eq!((sil.frames(), sil.height(), sil.width()), (frames, FRAME_HEIGHT, FRAME_WIDTH));
        assert_eq!((smpl.frames(), smpl.dim()), (frames, SMPL_DIM));
        sil.validate().unwrap();
        smpl.validate().unwrap();
    }
}

#[test]
fn foreground_fraction_is_bounded_for_every_range() {
    let n = (FRAME_HEIGHT * FRAME_WIDTH) as f64;
    for i in 0..20 {
        let (_, sig) = generate_subject(9, i);
        for range in RangeTag::ALL {
            let opts = RenderOptions { frames: 12, view_angle: (i as f64) * 0.3, noise: range.noise() };
            let (sil, _) = render_sequence(&sig, &opts, &mut sequence_rng(9, i, 0));
            for t in 0..sil.frames() {
                let f = sil.foreground(t) as f64 / n;
                assert!(f > 0.0 && f < 0.6, "subject {i} {range:?} frame {t}: {f}");
            }
        }
    }
}

fn random_sil(rng: &mut ChaCha8Rng) -> SilhouetteSequence {
    let (t, h, w) = (rng.random_range(1..5), rng.random_range(1..9), rng.random_range(1..9));
    let px = (0..t * h * w).map(|_| rng.random_range(0..2u8)).collect();
    SilhouetteSequence::new(t, h, w, px).unwrap()
}

fn random_smpl(rng: &mut ChaCha8Rng) -> SmplSequence {
    let t = rng.random_range(1..5);
    let v = (0..t * SMPL_DIM).map(|_| f32::from_bits(rng.random::<u32>() & 0xbfff_ffff)).collect();
    SmplSequence::new(t, v).unwrap()
}

#[test]
fn thousand_random_files_round_trip_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1000);
    for i in 0..1000 {
        let (ps, pm) = (dir.path().join(format!("{i}.cgsl")), dir.path().join(format!("{i}.cgsm")));
        let sil = random_sil(&mut rng);
        let smpl = random_smpl(&mut rng);
        sil.write(&ps).unwrap();
        smpl.write(&pm).unwrap();
        assert_eq!(SilhouetteSequence::read(&ps).unwrap(), sil);
        let back = SmplSequence::read(&pm).unwrap();
        let bits = |s: &SmplSequence| s.values().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back), bits(&smpl));
    }
}

#[test]
fn corrupted_smpl_headers() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let bytes = random_smpl(&mut rng).to_bytes();
    let offset = |b: &[u8]| match SmplSequence::from_bytes(b) {
        Err(Error::Format { offset, .. }) => offset,
        other => panic!("expected a format error, got {other:?}"),
    };
    let mut b = bytes.clone();
    b[1] = 0;
    assert_eq!(offset(&b), 0);
    let mut b = bytes.clone();
    b[4] = 9;
    assert_eq!(offset(&b), 4);
    assert_eq!(offset(&bytes[..3]), 0);
    assert!(offset(&bytes[..bytes.len() - 1]) >= 14);
    let mut b = bytes.clone();
    b.push(0);
    assert_eq!(offset(&b), bytes.len() as u64);
}

#[test]
fn split_sizes_parse_with_counts() {
    let mut rows = Vec::new();
    let row = |id: String, split: &str| ManifestRow {
        sequence_path: format!("sil/{id}.cgsl"),
        smpl_path: format!("smpl/{id}.cgsm"),
        subject_id: id,
        split: split.into(),
        age: 30.0,
        sex: Sex::Female,
        height_in: 65.0,
        weight_lb: 140.0,
        bmi: bmi_from_imperial(140.0, 65.0),
        view_tag: "000".into(),
        range_tag: RangeTag::Close,
    };
    for i in 0..522 {
        rows.push(row(format!("T{i:04}"), "train"));
        rows.push(row(format!("T{i:04}"), "train"));
    }
    for i in 0..244 {
        rows.push(row(format!("E{i:04}"), "test"));
    }
    let mut buf = Vec::new();
    Manifest { rows }.to_writer(&mut buf).unwrap();
    let back = Manifest::from_reader(buf.as_slice()).unwrap();
    assert_eq!(back.rows.len(), 522 * 2 + 244);
    assert_eq!(back.split_counts(), vec![("train".to_string(), 522), ("test".to_string(), 244)]);
}

#[test]
fn generated_dataset_assigns_splits() {
    let dir = tempfile::tempdir().unwrap();
    let opts = GenerateOptions {
        seed: 4,
        subjects: 5,
        seqs_per_subject: 3,
        frames: 6,
        test_subjects: 2,
        probe_seqs: 1,
        ranges: vec![RangeTag::Close, RangeTag::M400],
        views_deg: vec![0, 90],
    };
    let m = generate_dataset(&opts, dir.path()).unwrap();
    assert_eq!(
        m.split_counts(),
        vec![("train".into(), 3), ("probe".into(), 3), ("test".into(), 2)]
    );
    assert_eq!(Manifest::read(&dir.path().join(MANIFEST_FILE)).unwrap(), m);
    let ds = Dataset::load(&dir.path().join(MANIFEST_FILE), |_| true).unwrap();
    assert_eq!(ds.len(), 15);
    assert_eq!(ds.subjects.len(), 5);
    for s in &ds.samples {
        assert_eq!(s.sil.frames(), s.smpl.frames());
        assert_eq!(s.labels, s.row.meta().labels().unwrap());
    }
}

#[test]
fn sample_batch_examples() {
    let dir = tempfile::tempdir().unwrap();
    let opts = GenerateOptions { subjects: 3, seqs_per_subject: 2, frames: 10, ..GenerateOptions::default() };
    generate_dataset(&opts, dir.path()).unwrap();
    let ds = Dataset::load(&dir.path().join(MANIFEST_FILE), |_| true).unwrap();

    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let b = ds.sample_batch(2, 2, 30, &mut rng).unwrap();
    assert_eq!(b.sil.shape(), &[4, 30, 64, 44]);
    assert_eq!(b.smpl.shape(), &[4, 30, 82]);
    assert_eq!(b.ids[0], b.ids[1]);
    assert_eq!(b.ids[2], b.ids[3]);
    assert_ne!(b.ids[0], b.ids[2]);

    let frame = 64 * 44;
    let s = &ds.samples[b.samples[0]];
    let sil = b.sil.data();
    for k in 0..20 {
        assert_eq!(sil[k * frame..(k + 1) * frame], sil[(k + 10) * frame..(k + 11) * frame]);
    }
    let (w, _) = ds.window(b.samples[0], 3, 30);
    assert_eq!(w.len(), 30 * frame);
    assert_eq!(&w[..frame], &w[10 * frame..11 * frame]);
    assert!(w[..frame].iter().zip(s.sil.frame(3)).all(|(&a, &p)| a == p as f32));

    let again = ds.sample_batch(2, 2, 30, &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
    assert_eq!(again.samples, b.samples);
    assert_eq!(again.sil, b.sil);
    assert!(matches!(ds.sample_batch(4, 2, 30, &mut rng), Err(Error::Data(_))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn binning_is_total_and_monotone(a in 0.0f64..120.0, b in 0.0f64..120.0) {
        let (ca, cb) = (bin_age(a).unwrap(), bin_age(b).unwrap());
        prop_assert!(ca <= 4 && cb <= 4);
        if a <= b { prop_assert!(ca <= cb); }
        let (ba, bb) = (bin_bmi(a + 0.01).unwrap(), bin_bmi(b + 0.01).unwrap());
        prop_assert!(ba <= 3);
        if a <= b { prop_assert!(ba <= bb); }
    }

    #[test]
    fn rendering_is_pure(seed in any::<u64>(), index in 0usize..50, view in 0u32..360, frames in 1usize..6) {
        let (m1, sig) = generate_subject(seed, index);
        let (m2, sig2) = generate_subject(seed, index);
        prop_assert_eq!(&m1, &m2);
        let opts = RenderOptions { frames, view_angle: (view as f64).to_radians(), noise: 0.02 };
        let a = render_sequence(&sig, &opts, &mut sequence_rng(seed, index, 1));
        let b = render_sequence(&sig2, &opts, &mut sequence_rng(seed, index, 1));
        prop_assert_eq!(&a.0, &b.0);
        prop_assert_eq!(a.1.values(), b.1.values());
        prop_assert_eq!(a.0.frames(), a.1.frames());
        for v in a.1.values() {
            prop_assert!(v.is_finite());
        }
        for t in 0..frames {
            for r in a.1.pose(t).iter().chain(a.1.root(t)) {
                prop_assert!(r.abs() <= std::f32::consts::PI);
            }
        }
    }
}
