use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use avsr::data::*;
use avsr::error::AvsrError;
use avsr::video::VideoClip;

fn tiny() -> SynthConfig {
    SynthConfig { n_classes: 3, train_per_class: 2, val_per_class: 1, test_per_class: 1, image_size: 16, ..Default::default() }
}

fn clip(t: usize, h: usize, w: usize) -> VideoClip {
    VideoClip::new((0..t * h * w).map(|i| (i * 31 % 251) as u8).collect(), t, h, w).unwrap()
}

fn format_offset(e: AvsrError) -> (u64, String) {
    match e {
        AvsrError::Format { offset, detail, .. } => (offset, detail),
        other => panic!("expected a format error, got {other}"),
    }
}

#[test]
fn avf_header_and_payload_sizes() {
    let c = clip(29, 96, 96);
    let bytes = encode_video(&c).unwrap();
    assert_eq!(bytes.len(), 16 + 267_264);
    assert_eq!(&bytes[..4], b"AVF1");
    assert_eq!(&bytes[4..8], &29u32.to_le_bytes());
    assert_eq!(&bytes[8..12], &96u32.to_le_bytes());
    assert_eq!(decode_video(&bytes, Path::new("x")).unwrap(), c);
}

#[test]
fn avf_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let c = clip(3, 5, 7);
    let p = dir.path().join("c.avf");
    write_video_file(&c, &p).unwrap();
    assert_eq!(read_video_file(&p).unwrap(), c);
    // Frame-major then row-major.
    assert_eq!(fs::read(&p).unwrap()[16 + 35 + 7 + 2], c.pixel(1, 1, 2));
}

#[test]
fn avf_rejects_malformed_input_with_offsets() {
    let good = encode_video(&clip(2, 4, 4)).unwrap();
    let p = Path::new("bad.avf");

    let mut magic = good.clone();
    magic[0] = b'X';
    assert_eq!(format_offset(decode_video(&magic, p).unwrap_err()).0, 0);

    let (off, detail) = format_offset(decode_video(&good[..good.len() - 5], p).unwrap_err());
    assert_eq!(off, 16 + 27);
    assert!(detail.contains("expected 32") && detail.contains("found 27"), "{detail}");

    let (off, _) = format_offset(decode_video(&good[..10], p).unwrap_err());
    assert_eq!(off, 10);

    let mut trailing = good.clone();
    trailing.push(0);
    assert!(format_offset(decode_video(&trailing, p).unwrap_err()).1.contains("trailing"));

    let mut zero = good.clone();
    zero[8..12].copy_from_slice(&0u32.to_le_bytes());
    assert_eq!(format_offset(decode_video(&zero, p).unwrap_err()).0, 8);

    let mut huge = good;
    for o in [4, 8, 12] {
        huge[o..o + 4].copy_from_slice(&u32::MAX.to_le_bytes());
    }
    assert!(format_offset(decode_video(&huge, p).unwrap_err()).1.contains("overflow"));
}

#[test]
fn clip_counts_and_frame_count() {
    let cfg = SynthConfig::default();
    assert_eq!(cfg.frames(), 29);
    assert_eq!(cfg.samples(), 18_560);
    let total: usize = Split::ALL.iter().map(|&s| cfg.per_class(s)).sum::<usize>() * cfg.n_classes;
    assert_eq!(total, 3000);
    let bad = SynthConfig { n_classes: MAX_CLASSES + 1, ..Default::default() };
    assert!(bad.validate().is_err());
    assert!(SynthConfig { n_classes: MAX_CLASSES, ..Default::default() }.validate().is_ok());
}

#[test]
fn generation_is_deterministic() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let (pa, fa) = generate_dataset(&tiny(), a.path()).unwrap();
    let (pb, fb) = generate_dataset(&tiny(), b.path()).unwrap();
    assert_eq!(fa, fb);
    assert_eq!(fs::read(&pa).unwrap(), fs::read(&pb).unwrap());
    let (m, warnings) = read_manifest(&pa).unwrap();
    assert!(warnings.is_empty());
    assert_eq!(m.rows.len(), 12);
    for r in &m.rows {
        assert_eq!(fs::read(a.path().join(&r.video_path)).unwrap(), fs::read(b.path().join(&r.video_path)).unwrap());
        assert_eq!(fs::read(a.path().join(&r.audio_path)).unwrap(), fs::read(b.path().join(&r.audio_path)).unwrap());
    }
    let other = tempfile::tempdir().unwrap();
    let (_, fc) = generate_dataset(&SynthConfig { seed: 2, ..tiny() }, other.path()).unwrap();
    assert_ne!(fa, fc);
}

#[test]
fn files_match_the_in_memory_generator() {
    let dir = tempfile::tempdir().unwrap();
    let (path, _) = generate_dataset(&tiny(), dir.path()).unwrap();
    let (m, _) = read_manifest(&path).unwrap();
    let disk = load_dataset(&m).unwrap();
    let mem = synth_dataset(&tiny()).unwrap();
    assert_eq!(disk.classes, mem.classes);
    for split in Split::ALL {
        for (d, s) in disk.split(split).iter().zip(mem.split(split)) {
            assert_eq!((&d.id, d.class), (&s.id, s.class));
            assert_eq!(d.video, s.video);
            for (a, b) in d.audio.samples.iter().zip(&s.audio.samples) {
                assert!((a - b).abs() <= 0.5 / 32767.0 + 1e-7);
            }
        }
    }
}

fn write_rows(dir: &Path, body: &str) -> std::path::PathBuf {
    fs::create_dir_all(dir.join("a")).unwrap();
    for name in ["x", "y", "z"] {
        fs::write(dir.join("a").join(name), b"").unwrap();
    }
    let p = dir.join("manifest.csv");
    fs::write(&p, format!("id,label,split,audio_path,video_path\n{body}")).unwrap();
    p
}

fn manifest_row(e: AvsrError) -> usize {
    match e {
        AvsrError::Manifest { row, .. } => row,
        other => panic!("expected a manifest error, got {other}"),
    }
}

#[test]
fn manifest_errors_name_the_row() {
    let d = tempfile::tempdir().unwrap();
    assert_eq!(manifest_row(read_manifest(&write_rows(d.path(), "")).unwrap_err()), 1);
    let dup = "1,a,train,a/x,a/y\n2,a,val,a/x,a/y\n1,a,test,a/x,a/y\n";
    assert_eq!(manifest_row(read_manifest(&write_rows(d.path(), dup)).unwrap_err()), 4);
    let split = "1,a,train,a/x,a/y\n2,a,dev,a/x,a/y\n";
    assert_eq!(manifest_row(read_manifest(&write_rows(d.path(), split)).unwrap_err()), 3);
    let missing = "1,a,train,a/x,a/nope\n";
    assert_eq!(manifest_row(read_manifest(&write_rows(d.path(), missing)).unwrap_err()), 2);
    let p = d.path().join("m2.csv");
    fs::write(&p, "id,label,split,video_path,audio_path\n1,a,train,a/x,a/y\n").unwrap();
    assert_eq!(manifest_row(read_manifest(&p).unwrap_err()), 1);
}

#[test]
fn manifest_round_trip_and_label_warning() {
    let d = tempfile::tempdir().unwrap();
    let body = "b1,b,train,a/x,a/y\na1,a,train,a/x,a/z\na2,a,val,a/x,a/y\nc1,c,test,a/z,a/y\n";
    let p = write_rows(d.path(), body);
    let (m, warnings) = read_manifest(&p).unwrap();
    assert_eq!(m.rows.iter().map(|r| r.id.as_str()).collect::<Vec<_>>(), ["b1", "a1", "a2", "c1"]);
    assert!(warnings.iter().any(|w| w.contains("'c'") && w.contains("only in test")), "{warnings:?}");
    let q = d.path().join("again.csv");
    write_manifest(&m, &q).unwrap();
    assert_eq!(fs::read_to_string(&p).unwrap(), fs::read_to_string(&q).unwrap());
    assert_eq!(m.classes(), ["a", "b", "c"]);
}

#[test]
fn iterate_split_covers_every_index_once() {
    let batches = iterate_split(3000, 36, Some(5)).unwrap();
    assert_eq!(batches.len(), 84);
    assert!(batches[..83].iter().all(|b| b.len() == 36));
    assert_eq!(batches[83].len(), 12);
    let all: BTreeSet<usize> = batches.iter().flatten().copied().collect();
    assert_eq!(all.len(), 3000);
    assert_eq!(all.iter().next_back(), Some(&2999));
    assert_eq!(batches, iterate_split(3000, 36, Some(5)).unwrap());
    assert_ne!(batches, iterate_split(3000, 36, Some(6)).unwrap());
    assert_eq!(iterate_split(5, 2, None).unwrap(), vec![vec![0, 1], vec![2, 3], vec![4]]);
    assert!(iterate_split(5, 0, None).is_err());
}

#[test]
fn derived_seeds_differ_by_path() {
    let s: BTreeSet<u64> = (0..100).map(|i| derive_seed(1, &[i])).collect();
    assert_eq!(s.len(), 100);
    assert_ne!(derive_seed(1, &[1, 2]), derive_seed(1, &[2, 1]));
    assert_ne!(derive_seed(1, &[0]), derive_seed(2, &[0]));
}

// ---------------------------------------------------------------- separability oracle

fn nearest_centroid(train: &[(Vec<f64>, usize)], test: &[(Vec<f64>, usize)], n: usize) -> f64 {
    let dim = train[0].0.len();
    let mut sum = vec![vec![0.0; dim]; n];
    let mut count = vec![0.0; n];
    for (f, c) in train {
        for (s, v) in sum[*c].iter_mut().zip(f) {
            *s += v;
        }
        count[*c] += 1.0;
    }
    let centroids: Vec<Vec<f64>> = sum.iter().zip(&count).map(|(s, k)| s.iter().map(|v| v / k).collect()).collect();
    let hits = test
        .iter()
        .filter(|(f, c)| {
            let d = |m: &Vec<f64>| m.iter().zip(f).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
            let best = (0..n).min_by(|&a, &b| d(&centroids[a]).total_cmp(&d(&centroids[b]))).unwrap();
            best == *c
        })
        .count();
    hits as f64 / test.len() as f64
}

/// Log formant frequencies of both syllables.
fn audio_features(p: &ClipParams) -> Vec<f64> {
    p.formants.iter().flatten().map(|f| f.ln()).collect()
}

/// Blob displacement at the first syllable's peak, measured on the pixels.
fn video_features(v: &VideoClip, p: &ClipParams, fps: f64) -> Vec<f64> {
    let centroid = |t: usize| {
        let (mut sx, mut sy, mut sw) = (0.0, 0.0, 0.0);
        for y in 0..v.h {
            for x in 0..v.w {
                let w = (v.pixel(t, y, x) as f64 - 150.0).max(0.0);
                sx += w * x as f64;
                sy += w * y as f64;
                sw += w;
            }
        }
        (sx / sw, sy / sw)
    };
    let peak = ((p.onset + p.syllable / 2.0) * fps - 0.5).round() as usize;
    let (x1, y1) = centroid(peak);
    let (x0, y0) = centroid(0);
    let (dx, dy) = (x1 - x0, y1 - y0);
    let r = dx.hypot(dy);
    vec![dx / r, dy / r]
}

#[test]
fn classes_are_separable_by_generator_oracles() {
    let cfg = SynthConfig { visual_noise: 0.0, ..Default::default() };
    let (mut a_train, mut a_test, mut v_train, mut v_test) = (vec![], vec![], vec![], vec![]);
    for class in 0..cfg.n_classes {
        for (split, n) in [(Split::Train, 12), (Split::Test, 12)] {
            for i in 0..n {
                let (_, video, p) = synth_sample(&cfg, class, split, i);
                let (a, v) = (audio_features(&p), video_features(&video, &p, cfg.fps as f64));
                if split == Split::Train {
                    a_train.push((a, class));
                    v_train.push((v, class));
                } else {
                    a_test.push((a, class));
                    v_test.push((v, class));
                }
            }
        }
    }
    assert_eq!(nearest_centroid(&a_train, &a_test, cfg.n_classes), 1.0);
    assert_eq!(nearest_centroid(&v_train, &v_test, cfg.n_classes), 1.0);
}

#[test]
fn class_indices_follow_sorted_labels() {
    let d = tempfile::tempdir().unwrap();
    let c = clip(1, 2, 2);
    write_video_file(&c, &d.path().join("v")).unwrap();
    let w = avsr::audio::WaveformClip::new(vec![0.1; 10], 16_000).unwrap();
    avsr::audio::write_wav(&d.path().join("w"), &w).unwrap();
    let p = d.path().join("manifest.csv");
    fs::write(&p, "id,label,split,audio_path,video_path\n1,zeta,train,w,v\n2,alpha,train,w,v\n").unwrap();
    let (m, _) = read_manifest(&p).unwrap();
    let ds = load_dataset(&m).unwrap();
    assert_eq!(ds.classes, ["alpha", "zeta"]);
    assert_eq!(ds.train.iter().map(|s| s.class).collect::<Vec<_>>(), [1, 0]);
}
