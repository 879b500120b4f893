use factorizephys::data::{
    chunk_dataset, generate_synthetic_clip, read_index, resize_bilinear, synth_bvp, write_dataset, DataError,
    DatasetConfig, FrameData, Frames, Labels, SynthConfig,
};
use factorizephys::model::diff_layer;
use factorizephys::signal::{estimate_hr_fft, SignalTrace};
use factorizephys::tensor::{Tape, Tensor};
use proptest::prelude::*;

fn quiet(hr: f64) -> SynthConfig {
    SynthConfig {
        hr_bpm: hr,
        noise_sigma: 0.0,
        illum_amp: 0.0,
        hr_drift: 0.0,
        height: 12,
        width: 12,
        ..Default::default()
    }
}

fn pixel_trace(f: &Frames, y: usize, x: usize, c: usize) -> Vec<f64> {
    let v = f.to_f32();
    (0..f.t).map(|t| v[((t * f.h + y) * f.w + x) * f.c + c] as f64).collect()
}

#[test]
fn masked_pixels_carry_the_configured_heart_rate() {
    let cfg = SynthConfig { height: 72, width: 72, ..quiet(72.0) };
    let (frames, _) = generate_synthetic_clip(&cfg).unwrap();
    for (y, x) in [(36, 36), (30, 40), (44, 30)] {
        assert!(cfg.mask.contains(y as f64 / 72.0, x as f64 / 72.0));
        let hr = estimate_hr_fft(&SignalTrace::new(pixel_trace(&frames, y, x, 1), cfg.fs)).unwrap();
        assert!((hr - 72.0).abs() <= 1.0, "({y},{x}): {hr}");
    }
}

#[test]
fn label_heart_rate_is_within_one_bin_across_the_band() {
    let mut hr = 45.0;
    while hr <= 180.0 {
        let (_, labels) = generate_synthetic_clip(&quiet(hr)).unwrap();
        let n = labels.values.len();
        let bin = 60.0 * 30.0 / (4 * n.next_power_of_two()) as f64;
        let est = estimate_hr_fft(&SignalTrace::new(labels.values.iter().map(|&v| v as f64).collect(), 30.0)).unwrap();
        assert!((est - hr).abs() <= bin, "{hr}: {est}");
        hr += 2.5;
    }
}

#[test]
fn bvp_has_the_stated_harmonic_form() {
    let cfg = SynthConfig { duration_s: 2.0, ..quiet(90.0) };
    let f = 1.5;
    for (i, v) in synth_bvp(&cfg).iter().enumerate() {
        let p = 2.0 * std::f64::consts::PI * f * i as f64 / 30.0;
        assert!((v - (p.sin() + 0.3 * (2.0 * p).sin())).abs() < 1e-9);
    }
}

#[test]
fn zero_amplitude_gives_static_frames_and_null_diff() {
    let cfg = SynthConfig { amplitude: 0.0, duration_s: 1.0, ..quiet(80.0) };
    let (frames, _) = generate_synthetic_clip(&cfg).unwrap();
    let v = frames.to_f32();
    let plane = frames.h * frames.w * frames.c;
    for t in 1..frames.t {
        assert_eq!(&v[t * plane..(t + 1) * plane], &v[..plane]);
    }
    let chunk = &chunk_dataset(&frames, &Labels { fs: 30.0, values: (0..30).map(|i| i as f32).collect() }, 30).unwrap()[0];
    let mut tape = Tape::<f32>::no_grad();
    let x = tape.constant(chunk.frames.reshape(&[1, 3, 30, 12, 12]).unwrap()).unwrap();
    let d = diff_layer(&mut tape, x).unwrap();
    assert!(tape.value(d).data().iter().all(|&x| x.abs() < 1e-6));
}

#[test]
fn generation_is_seeded() {
    let cfg = SynthConfig { seed: 9, duration_s: 2.0, height: 16, width: 16, ..Default::default() };
    let (a, la) = generate_synthetic_clip(&cfg).unwrap();
    let (b, lb) = generate_synthetic_clip(&cfg).unwrap();
    assert_eq!(a.encode(), b.encode());
    assert_eq!(la.encode(), lb.encode());
    let (c, _) = generate_synthetic_clip(&SynthConfig { seed: 10, ..cfg }).unwrap();
    assert_ne!(a.encode(), c.encode());
}

#[test]
fn clipping_budget_is_an_error() {
    let cfg = SynthConfig { amplitude: 90.0, ..Default::default() };
    assert!(matches!(generate_synthetic_clip(&cfg), Err(DataError::Config(_))));
    let cfg = SynthConfig { hr_bpm: 20.0, ..Default::default() };
    assert!(matches!(generate_synthetic_clip(&cfg), Err(DataError::Config(_))));
}

#[test]
fn chunks_keep_frames_and_labels_aligned() {
    let cfg = SynthConfig { duration_s: 16.0, height: 6, width: 5, ..Default::default() };
    let (frames, labels) = generate_synthetic_clip(&cfg).unwrap();
    assert_eq!(frames.t, 480);
    let chunks = chunk_dataset(&frames, &labels, 161).unwrap();
    assert_eq!(chunks.len(), 2);
    let src = frames.to_f32();
    for (k, ch) in chunks.iter().enumerate() {
        assert_eq!(ch.frames.shape(), &[3, 161, 6, 5]);
        let lab: Vec<f64> = ch.labels.iter().map(|&v| v as f64).collect();
        let m = lab.iter().sum::<f64>() / 161.0;
        let sd = (lab.iter().map(|v| (v - m).powi(2)).sum::<f64>() / 161.0).sqrt();
        assert!(m.abs() < 1e-5 && (sd - 1.0).abs() < 1e-5);
        let orig: Vec<f64> = labels.values[k * 161..(k + 1) * 161].iter().map(|&v| v as f64).collect();
        let om = orig.iter().sum::<f64>() / 161.0;
        let osd = (orig.iter().map(|v| (v - om).powi(2)).sum::<f64>() / 161.0).sqrt();
        for t in [0, 37, 160] {
            assert!((lab[t] - (orig[t] - om) / osd).abs() < 1e-5);
            for (c, y, x) in [(0, 0, 0), (1, 3, 2), (2, 5, 4)] {
                let want = src[(((k * 161 + t) * 6 + y) * 5 + x) * 3 + c];
                assert_eq!(ch.frames.data()[((c * 161 + t) * 6 + y) * 5 + x], want);
            }
        }
    }
    let one = chunk_dataset(&frames, &labels, 480).unwrap();
    assert_eq!(one.len(), 1);
    assert!(matches!(chunk_dataset(&frames, &labels, 481), Err(DataError::TooShort { .. })));
}

#[test]
fn resize_examples() {
    let f = Frames::new([2, 4, 5, 3], FrameData::F32((0..120).map(|i| i as f32 * 0.37).collect())).unwrap();
    assert_eq!(resize_bilinear(&f, 4, 5).unwrap().encode(), f.encode());

    let board = Frames::new([1, 2, 2, 1], FrameData::F32(vec![0.0, 10.0, 30.0, 7.0])).unwrap();
    assert_eq!(resize_bilinear(&board, 1, 1).unwrap().to_f32(), vec![11.75]);

    let (h, w) = (64, 48);
    let grad = |y: f64, x: f64| 100.0 + 60.0 * (y / h as f64) + 40.0 * (x / w as f64);
    let smooth = Frames::new(
        [1, h, w, 1],
        FrameData::F32((0..h * w).map(|p| grad((p / w) as f64 + 0.5, (p % w) as f64 + 0.5) as f32).collect()),
    )
    .unwrap();
    let back = resize_bilinear(&resize_bilinear(&smooth, 32, 24).unwrap(), h, w).unwrap();
    for (p, (a, b)) in back.to_f32().iter().zip(smooth.to_f32()).enumerate() {
        assert!(((a - b) / b).abs() < 0.02);
        let (y, x) = (p / w, p % w);
        if (1..h - 1).contains(&y) && (1..w - 1).contains(&x) {
            assert!((a - b).abs() < 1e-3, "interior ({y},{x})");
        }
    }
    assert!(resize_bilinear(&smooth, 0, 3).is_err());
}

#[test]
fn file_round_trips_and_header_errors() {
    let dir = tempfile::tempdir().unwrap();
    let (frames, labels) = generate_synthetic_clip(&SynthConfig { duration_s: 1.0, height: 8, width: 8, ..Default::default() }).unwrap();
    let fp = dir.path().join("a.fpv");
    let lp = dir.path().join("a.fpl");
    frames.write(&fp).unwrap();
    labels.write(&lp).unwrap();
    assert_eq!(Frames::read(&fp).unwrap(), frames);
    assert_eq!(Labels::read(&lp).unwrap(), labels);
    assert_eq!(&std::fs::read(&fp).unwrap()[..4], b"FPV1");
    assert_eq!(&std::fs::read(&lp).unwrap()[..4], b"FPL1");

    let FrameData::U8(raw) = &frames.data else { panic!("u8 expected") };
    let promoted = Frames::read(&fp).unwrap().to_f32();
    assert!(raw.iter().zip(&promoted).all(|(&u, &f)| f == u as f32));

    let bytes = frames.encode();
    assert!(matches!(Frames::decode(&bytes[..bytes.len() - 1]), Err(DataError::Truncated { .. })));
    let mut magic = bytes.clone();
    magic[0] = b'X';
    assert!(matches!(Frames::decode(&magic), Err(DataError::BadMagic { .. })));
    let mut tag = bytes.clone();
    tag[20] = 7;
    assert!(matches!(Frames::decode(&tag), Err(DataError::DtypeTag(7))));
    let lb = labels.encode();
    assert!(matches!(Labels::decode(&lb[..lb.len() - 2]), Err(DataError::Truncated { .. })));
    assert!(matches!(Frames::read(&dir.path().join("missing.fpv")), Err(DataError::Io { .. })));
    assert!(labels.to_csv().lines().count() > labels.values.len());
}

#[test]
fn dataset_layout_and_split() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = DatasetConfig {
        clips: 8,
        frames: 161,
        clip: SynthConfig { height: 8, width: 8, ..Default::default() },
        ..Default::default()
    };
    let index = write_dataset(&cfg, dir.path()).unwrap();
    assert_eq!(read_index(dir.path()).unwrap(), index);
    let held: Vec<usize> = (0..8).filter(|&i| index.clips[i].holdout).collect();
    assert_eq!(held, vec![3, 7]);
    for (i, c) in index.clips.iter().enumerate() {
        let lo = 50.0 + 100.0 * i as f64 / 8.0;
        assert!((lo..lo + 12.5).contains(&c.hr_bpm));
        assert_eq!(Frames::read(&dir.path().join(&c.frames)).unwrap().t, 161);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn frames_files_round_trip(t in 1usize..5, h in 1usize..6, w in 1usize..6, c in 1usize..4, float in any::<bool>(), seed in 0u32..1000) {
        let n = t * h * w * c;
        let data = if float {
            FrameData::F32((0..n).map(|i| (i as f32 + seed as f32).sin() * 1e3).collect())
        } else {
            FrameData::U8((0..n).map(|i| ((i as u32 * 31 + seed) % 256) as u8).collect())
        };
        let f = Frames::new([t, h, w, c], data).unwrap();
        prop_assert_eq!(Frames::decode(&f.encode()).unwrap(), f);
    }

    #[test]
    fn label_files_round_trip(values in prop::collection::vec(-1e6f32..1e6, 0..200), fs in 1f32..240.0) {
        let l = Labels { fs, values };
        prop_assert_eq!(Labels::decode(&l.encode()).unwrap(), l);
    }
}

#[test]
fn chunk_frames_are_tensors() {
    let frames = Frames::new([4, 1, 1, 3], FrameData::U8((0..12).collect())).unwrap();
    let labels = Labels { fs: 30.0, values: vec![0.0, 1.0, 0.0, 1.0] };
    let c = &chunk_dataset(&frames, &labels, 4).unwrap()[0];
    let want = Tensor::new(vec![3, 4, 1, 1], vec![0.0, 3.0, 6.0, 9.0, 1.0, 4.0, 7.0, 10.0, 2.0, 5.0, 8.0, 11.0]).unwrap();
    assert_eq!(c.frames, want);
}
