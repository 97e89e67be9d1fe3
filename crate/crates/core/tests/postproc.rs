use std::io::Cursor;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use uadseg::postproc::*;
use uadseg::volume::{zscore_normalize, LABEL_ET, LABEL_NET, LABEL_SNFH};
use uadseg::{generate_phantom, Dims, Error, Modality, MultimodalVolume, PhantomSpec};

mod support;
use support::{holes_oracle, lcc_oracle, morph_oracle, otsu_oracle};

fn mask(dims: Dims, f: impl Fn(usize, usize, usize) -> bool) -> BinaryMask3D {
    let mut data = Vec::with_capacity(dims.voxels());
    for z in 0..dims.d {
        for y in 0..dims.h {
            for x in 0..dims.w {
                data.push(f(z, y, x));
            }
        }
    }
    BinaryMask3D::from_vec(dims, data).unwrap()
}

fn random_mask(rng: &mut ChaCha8Rng) -> BinaryMask3D {
    let dims = Dims::new(
        rng.random_range(1..=16),
        rng.random_range(1..=16),
        rng.random_range(1..=16),
    );
    let p: f64 = rng.random_range(0.05..0.7);
    let data = (0..dims.voxels()).map(|_| rng.random_bool(p)).collect();
    BinaryMask3D::from_vec(dims, data).unwrap()
}

/// Depth-first region growing with an explicit stack.
fn grow_oracle(image: &[f32], w: usize, p: &PromptSet, tol: f64) -> Vec<bool> {
    let mut inside = vec![false; image.len()];
    let mut stack: Vec<(usize, usize)> = Vec::new();
    let mut members: Vec<f64> = Vec::new();
    for &[x, y] in &p.points {
        if !inside[y * w + x] {
            inside[y * w + x] = true;
            members.push(image[y * w + x] as f64);
            stack.push((x, y));
        }
    }
    while let Some((x, y)) = stack.pop() {
        for (dx, dy) in [(0i64, -1i64), (0, 1), (-1, 0), (1, 0)] {
            let (nx, ny) = (x as i64 + dx, y as i64 + dy);
            if nx < 0 || ny < 0 || !p.bbox_contains(nx as usize, ny as usize) {
                continue;
            }
            let j = ny as usize * w + nx as usize;
            let mean = members.iter().sum::<f64>() / members.len() as f64;
            if !inside[j] && (image[j] as f64 - mean).abs() <= tol {
                inside[j] = true;
                members.push(image[j] as f64);
                stack.push((nx as usize, ny as usize));
            }
        }
    }
    inside
}

fn dice(a: &[bool], b: &[bool]) -> f64 {
    let inter = a.iter().zip(b).filter(|(&p, &q)| p && q).count() as f64;
    let total = (a.iter().filter(|&&v| v).count() + b.iter().filter(|&&v| v).count()) as f64;
    if total == 0.0 {
        1.0
    } else {
        2.0 * inter / total
    }
}

// ---- residual and threshold ----------------------------------------------

fn volume(dims: Dims, modalities: Vec<Modality>, f: impl Fn(usize) -> f32) -> MultimodalVolume {
    let n = modalities.len() * dims.voxels();
    MultimodalVolume::new(modalities, dims, [1.0; 3], (0..n).map(f).collect()).unwrap()
}

#[test]
fn residual_sign_convention() {
    let dims = Dims::new(2, 3, 4);
    let ms = vec![Modality::T1c, Modality::T2f];
    let orig = volume(dims, ms.clone(), |i| (i as f32 * 0.37).sin() * 3.0);
    let same = residual(&orig, &orig).unwrap();
    assert!(same.as_volume().data().iter().all(|&v| v == 0.0));
    let lower = orig.with_data(orig.data().iter().map(|v| v - 2.0).collect()).unwrap();
    let r = residual(&orig, &lower).unwrap();
    assert!(r.as_volume().data().iter().all(|&v| (v - 2.0).abs() < 1e-6));
    let higher = orig.with_data(orig.data().iter().map(|v| v + 5.0).collect()).unwrap();
    assert!(residual(&orig, &higher)
        .unwrap()
        .as_volume()
        .data()
        .iter()
        .all(|&v| v == 0.0));
    let other = volume(Dims::new(2, 3, 5), ms, |_| 0.0);
    assert!(matches!(residual(&orig, &other), Err(Error::ShapeMismatch { .. })));
}

#[test]
fn threshold_rule_examples() {
    let (out, tau) = threshold(&[0.0, 1.0, 1.9, 2.0, 10.0], 0.2, 1.2);
    assert_eq!(tau, 2.0);
    assert_eq!(out, vec![0.0, 0.0, 0.0, 2.0, 10.0]);
    let (out, tau) = threshold(&[3.0, 1.1, 1.2, 0.5], 0.2, 1.2);
    assert_eq!(tau, 1.2);
    assert_eq!(out, vec![3.0, 0.0, 1.2, 0.0]);
    let (out, tau) = threshold(&[0.0; 8], 0.2, 1.2);
    assert_eq!(tau, 1.2);
    assert!(out.iter().all(|&v| v == 0.0));
}

// ---- Otsu ----------------------------------------------------------------

#[test]
fn otsu_two_clusters() {
    let mut map = vec![0.0f32; 300];
    map[..100].fill(1.5);
    map[100..200].fill(8.0);
    let m = otsu_binarize_values(&map);
    assert!(m[..100].iter().all(|&b| !b));
    assert!(m[100..200].iter().all(|&b| b));
    assert!(m[200..].iter().all(|&b| !b));
    let hist = OtsuHistogram::new(&map).unwrap();
    let k = otsu_split(&hist.counts);
    let cut = hist.lo as f64 + (k + 1) as f64 * (hist.hi - hist.lo) as f64 / 256.0;
    assert!(cut > 1.5 && cut <= 8.0, "threshold {cut}");
}

#[test]
fn otsu_degenerate_maps() {
    assert!(otsu_binarize_values(&[0.0; 10]).iter().all(|&b| !b));
    let single = [0.0, 3.0, 3.0, 0.0, 3.0];
    assert_eq!(otsu_binarize_values(&single), vec![false, true, true, false, true]);
}

#[test]
fn otsu_matches_exhaustive_search() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for case in 0..100 {
        let n = rng.random_range(50..3000);
        let modes = rng.random_range(1..4);
        let map: Vec<f32> = (0..n)
            .map(|_| {
                if rng.random_bool(0.4) {
                    0.0
                } else {
                    let c = rng.random_range(0..modes) as f32 * 3.0 + 1.2;
                    c + rng.random::<f32>() * rng.random_range(0.1..4.0)
                }
            })
            .collect();
        assert_eq!(otsu_binarize_values(&map), otsu_oracle(&map), "case {case}");
    }
}

// ---- morphology and components --------------------------------------------

#[test]
fn morphology_examples() {
    let dims = Dims::new(1, 9, 9);
    let dot = mask(dims, |_, y, x| y == 4 && x == 4);
    assert!(morph_clean(&dot).is_empty());
    let holed = mask(dims, |_, y, x| {
        (2..7).contains(&y) && (2..7).contains(&x) && !(y == 4 && x == 4)
    });
    // Opening with the cross cannot keep a small holed square intact: its
    // erosion leaves only four isolated pixels.
    let square = mask(dims, |_, y, x| (2..7).contains(&y) && (2..7).contains(&x));
    assert_eq!(morph_clean(&holed).data(), &morph_oracle(&holed)[..]);
    assert!(morph_clean(&holed).is_subset_of(&square) && morph_clean(&holed) != square);
    // A larger square keeps everything but its corners, and the hole is closed.
    let dims = Dims::new(1, 11, 11);
    let inside = |y: usize, x: usize| (2..9).contains(&y) && (2..9).contains(&x);
    let corner = |y: usize, x: usize| (y == 2 || y == 8) && (x == 2 || x == 8);
    let holed = mask(dims, |_, y, x| inside(y, x) && !(y == 5 && x == 5));
    let expected = mask(dims, |_, y, x| inside(y, x) && !corner(y, x));
    assert_eq!(morph_clean(&holed), expected);
    assert_eq!(morph_clean(&holed).data(), &morph_oracle(&holed)[..]);
    assert!(morph_clean(&BinaryMask3D::zeros(dims)).is_empty());
}

#[test]
fn morphology_and_components_match_oracles() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for case in 0..100 {
        let m = random_mask(&mut rng);
        assert_eq!(morph_clean(&m).data(), &morph_oracle(&m)[..], "morph case {case}");
        let lcc = largest_component_3d(&m);
        assert_eq!(lcc.data(), &lcc_oracle(&m)[..], "lcc case {case}");
        let (_, sizes) = label_components_3d(&lcc);
        assert!(sizes.len() <= 1);
        let Dims { h, w, .. } = m.dims();
        for z in 0..m.dims().d {
            assert_eq!(
                fill_holes2d(m.slice(z), h, w),
                holes_oracle(m.slice(z), h, w),
                "holes case {case}"
            );
        }
    }
}

#[test]
fn component_examples() {
    let dims = Dims::new(8, 8, 8);
    let big = mask(dims, |z, y, x| z < 5 && y < 5 && x < 4);
    let both = mask(dims, |z, y, x| {
        (z < 5 && y < 5 && x < 4) || (z == 7 && y == 7 && x >= 3)
    });
    assert_eq!(largest_component_3d(&both), big);
    assert!(largest_component_3d(&BinaryMask3D::zeros(dims)).is_empty());
    let late = mask(dims, |z, y, x| z == 6 && y < 2 && x < 2);
    let tie = mask(dims, |z, y, x| {
        (z == 0 && y == 6 && x >= 6) || (z == 0 && y == 7 && x >= 6) || (z == 6 && y < 2 && x < 2)
    });
    let kept = largest_component_3d(&tie);
    assert_eq!(kept.count(), 4);
    assert!(kept.and(&late).unwrap().is_empty());
    // Diagonal contact joins under 26- but not 6-connectivity.
    let diag = mask(dims, |z, y, x| (z, y, x) == (0, 0, 0) || (z, y, x) == (1, 1, 1));
    assert_eq!(largest_component_3d(&diag).count(), 2);
    assert_eq!(largest_component(&diag, 6).count(), 1);
}

// ---- prompts -------------------------------------------------------------

#[test]
fn prompt_examples() {
    let (h, w) = (16, 16);
    let mut m = vec![false; h * w];
    m[7 * w + 9] = true;
    let p = make_prompts(&m, h, w, 3).unwrap();
    assert_eq!(p.bbox, [9, 7, 9, 7]);
    assert_eq!(p.points, vec![[9, 7]; 5]);

    let mut block = vec![false; h * w];
    for y in 4..7 {
        for x in 10..13 {
            block[y * w + x] = true;
        }
    }
    let p = make_prompts(&block, h, w, 5).unwrap();
    assert_eq!(p.bbox, [10, 4, 12, 6]);
    assert_eq!(p.points.len(), 5);
    let mut distinct = p.points.clone();
    distinct.sort();
    distinct.dedup();
    assert_eq!(distinct.len(), 5);
    assert!(p.points.iter().all(|&[x, y]| block[y * w + x] && p.bbox_contains(x, y)));

    assert!(matches!(
        make_prompts(&vec![false; h * w], h, w, 0),
        Err(Error::Empty(_))
    ));
}

#[test]
fn prompts_deterministic() {
    let (h, w) = (40, 40);
    let m: Vec<bool> = (0..h * w)
        .map(|i| (i / w) >= 5 && (i / w) < 30 && (i % w) < 40)
        .collect();
    assert_eq!(m.iter().filter(|&&b| b).count(), 1000);
    let a = make_prompts(&m, h, w, 99).unwrap();
    assert_eq!(a, make_prompts(&m, h, w, 99).unwrap());
    assert_ne!(a.points, make_prompts(&m, h, w, 100).unwrap().points);
}

proptest! {
    #[test]
    fn prompts_inside_mask(bits in prop::collection::vec(any::<bool>(), 64), seed in any::<u64>()) {
        prop_assume!(bits.iter().any(|&b| b));
        let p = make_prompts(&bits, 8, 8, seed).unwrap();
        prop_assert_eq!(p.points.len(), 5);
        for &[x, y] in &p.points {
            prop_assert!(bits[y * 8 + x]);
            prop_assert!(p.bbox_contains(x, y));
        }
    }
}

// ---- refinement contract -------------------------------------------------

/// Scripted refiner: replays confidences (or failures) and records calls.
struct Script {
    replies: Vec<Option<f64>>,
    calls: Vec<PromptSet>,
}

impl RegionRefiner for Script {
    fn refine(&mut self, req: &RefineRequest<'_>) -> uadseg::Result<RefinerReply> {
        let step = self.replies[self.calls.len().min(self.replies.len() - 1)];
        self.calls.push(req.prompts.clone());
        match step {
            None => Err(Error::Refiner("scripted failure".into())),
            Some(c) => Ok(RefinerReply {
                mask: vec![true; req.h * req.w],
                confidence: c,
            }),
        }
    }
}

fn small_case() -> (Vec<f32>, Vec<bool>) {
    let image = (0..64).map(|i| i as f32).collect();
    let initial = (0..64).map(|i| (i / 8) >= 2 && (i / 8) < 5 && (i % 8) >= 3).collect();
    (image, initial)
}

#[test]
fn refine_accepts_confident_first_reply() {
    let (image, initial) = small_case();
    let mut s = Script {
        replies: vec![Some(0.95)],
        calls: vec![],
    };
    let out = refine_slice(&image, &initial, 8, 8, &mut s, 10, RefinePolicy::default()).unwrap();
    assert_eq!((out.attempts, out.accepted, out.confidence), (1, true, 0.95));
    assert_eq!(out.mask, vec![true; 64]);
    assert_eq!(s.calls[0].seed, 10);
}

#[test]
fn refine_retries_three_times_then_falls_back() {
    let (image, initial) = small_case();
    let mut s = Script {
        replies: vec![Some(0.5)],
        calls: vec![],
    };
    let out = refine_slice(&image, &initial, 8, 8, &mut s, 10, RefinePolicy::default()).unwrap();
    assert_eq!((out.attempts, out.accepted, out.failed), (3, false, false));
    assert_eq!(out.mask, initial);
    let seeds: Vec<u64> = s.calls.iter().map(|p| p.seed).collect();
    assert_eq!(seeds, vec![10, 11, 12]);
    assert!(s.calls.windows(2).any(|w| w[0].points != w[1].points));

    let mut s = Script {
        replies: vec![Some(0.5), Some(0.89), Some(0.9)],
        calls: vec![],
    };
    let out = refine_slice(&image, &initial, 8, 8, &mut s, 0, RefinePolicy::default()).unwrap();
    assert_eq!((out.attempts, out.accepted), (3, true));
}

#[test]
fn refine_failure_keeps_initial_mask() {
    let (image, initial) = small_case();
    let mut s = Script {
        replies: vec![Some(0.3), None],
        calls: vec![],
    };
    let out = refine_slice(&image, &initial, 8, 8, &mut s, 0, RefinePolicy::default()).unwrap();
    assert_eq!((out.attempts, out.accepted, out.failed), (2, false, true));
    assert_eq!(out.mask, initial);

    struct Sized;
    impl RegionRefiner for Sized {
        fn refine(&mut self, _: &RefineRequest<'_>) -> uadseg::Result<RefinerReply> {
            Ok(RefinerReply {
                mask: vec![true; 3],
                confidence: 1.0,
            })
        }
    }
    let out = refine_slice(&image, &initial, 8, 8, &mut Sized, 0, RefinePolicy::default()).unwrap();
    assert!(out.failed && !out.accepted);
    assert_eq!(out.mask, initial);
}

// ---- built-in refiner ----------------------------------------------------

#[test]
fn builtin_grows_homogeneous_block() {
    let (h, w) = (20, 20);
    let inside = |i: usize| (5..15).contains(&(i / w)) && (5..15).contains(&(i % w));
    let image: Vec<f32> = (0..h * w).map(|i| if inside(i) { 4.0 } else { -1.0 }).collect();
    let block: Vec<bool> = (0..h * w).map(inside).collect();
    let out = refine_slice(
        &image,
        &block,
        h,
        w,
        &mut BuiltinRefiner::default(),
        1,
        RefinePolicy::default(),
    )
    .unwrap();
    assert!(out.accepted);
    assert_eq!(out.confidence, 1.0);
    assert_eq!(out.mask, block);
}

#[test]
fn builtin_low_confidence_on_background_prompts() {
    let (h, w) = (20, 20);
    // Mask covers a dark 10×10 area that holds only a small bright patch.
    let bright = |i: usize| (8..10).contains(&(i / w)) && (8..10).contains(&(i % w));
    let image: Vec<f32> = (0..h * w).map(|i| if bright(i) { 5.0 } else { 0.0 }).collect();
    let initial: Vec<bool> = (0..h * w)
        .map(|i| (5..15).contains(&(i / w)) && (5..15).contains(&(i % w)))
        .collect();
    let prompts = PromptSet {
        bbox: [5, 5, 14, 14],
        points: vec![[8, 8], [9, 8], [8, 9], [9, 9], [8, 8]],
        seed: 0,
    };
    let reply = BuiltinRefiner::default()
        .refine(&RefineRequest {
            image: &image,
            initial: &initial,
            h,
            w,
            prompts: &prompts,
        })
        .unwrap();
    assert_eq!(reply.mask.iter().filter(|&&b| b).count(), 4);
    assert!((reply.confidence - 0.04).abs() < 1e-12);
}

#[test]
fn builtin_on_phantom_enhancing_slice() {
    for seed in [3u64, 8, 21] {
        let ph = generate_phantom(&PhantomSpec::tumor(seed)).unwrap();
        let (norm, _) = zscore_normalize(&ph.volume);
        let dims = ph.labels.dims();
        let z = (0..dims.d)
            .max_by_key(|&z| ph.labels.slice(z).iter().filter(|&&l| l == LABEL_ET).count())
            .unwrap();
        let gt: Vec<bool> = ph.labels.slice(z).iter().map(|&l| l == LABEL_ET).collect();
        let image = &norm.modality(Modality::T1c).unwrap()[z * dims.plane()..(z + 1) * dims.plane()];
        let prompts = make_prompts(&gt, dims.h, dims.w, seed).unwrap();
        let refiner = BuiltinRefiner::default();
        let grown = refiner.grow(image, dims.w, &prompts);
        let oracle = grow_oracle(image, dims.w, &prompts, refiner.tolerance);
        let (ours, theirs) = (dice(&grown, &gt), dice(&oracle, &gt));
        assert!(ours >= theirs - 1e-12, "seed {seed}: {ours} < oracle {theirs}");
        assert!(ours > 0.8, "seed {seed}: dice {ours}");
    }
}

// ---- wire protocol -------------------------------------------------------

#[test]
fn wire_round_trip_through_server() {
    let (h, w) = (12, 10);
    let image: Vec<f32> = (0..h * w).map(|i| if (i % w) < 5 { 3.0 } else { 0.0 }).collect();
    let prompts = PromptSet {
        bbox: [0, 0, 9, 11],
        points: vec![[1, 1], [2, 3], [0, 5], [4, 11], [3, 7]],
        seed: 0,
    };
    let initial = vec![false; h * w];
    let req = RefineRequest {
        image: &image,
        initial: &initial,
        h,
        w,
        prompts: &prompts,
    };
    let mut input = serde_json::to_string(&WireRequest::encode(4, &req)).unwrap();
    input.push_str("\n{\"id\": 5, \"h\": 2}\nnot json\n");
    input.push_str(&serde_json::to_string(&WireRequest::encode(6, &req)).unwrap());
    input.push('\n');
    let mut out = Vec::new();
    serve_refiner(&mut BuiltinRefiner::default(), Cursor::new(input), &mut out).unwrap();
    let lines: Vec<WireResponse> = String::from_utf8(out)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.iter().map(|r| r.id).collect::<Vec<_>>(), vec![4, 5, 0, 6]);
    let reply = lines[0].decode(4, h * w).unwrap();
    let left: Vec<bool> = (0..h * w).map(|i| (i % w) < 5).collect();
    assert_eq!(reply.mask, left);
    assert!((reply.confidence - 0.5).abs() < 1e-12);
    assert!(lines[1].error.is_some() && lines[2].error.is_some());
    assert!(matches!(lines[1].decode(5, h * w), Err(Error::Refiner(_))));
    assert_eq!(lines[3].decode(6, h * w).unwrap(), reply);
}

#[test]
fn wire_response_validation() {
    let ok = WireResponse::from_mask(2, &[true, false, true], 0.7);
    assert!(ok.decode(2, 3).is_ok());
    assert!(ok.decode(3, 3).is_err(), "id mismatch");
    assert!(ok.decode(2, 4).is_err(), "size mismatch");
    let bad = WireResponse {
        mask_b64: Some("AAIB".into()),
        ..ok.clone()
    };
    assert!(bad.decode(2, 3).is_err(), "byte 2 is not a mask value");
    let missing = WireResponse { confidence: None, ..ok };
    assert!(missing.decode(2, 3).is_err());
}

#[test]
fn external_refiner_failures_fall_back() {
    let (image, initial) = small_case();
    assert!(matches!(
        ExternalRefiner::spawn(&["/nonexistent/refiner".into()]),
        Err(Error::Refiner(_))
    ));
    assert!(matches!(ExternalRefiner::spawn(&[]), Err(Error::InvalidConfig(_))));
    // `cat` echoes the request, which is not a valid response.
    let mut echo = ExternalRefiner::spawn(&["cat".into()]).unwrap();
    let out = refine_slice(&image, &initial, 8, 8, &mut echo, 0, RefinePolicy::default()).unwrap();
    assert!(out.failed && out.mask == initial && out.attempts == 1);
    let mut gone = ExternalRefiner::spawn(&["true".into()]).unwrap();
    for _ in 0..2 {
        let out = refine_slice(&image, &initial, 8, 8, &mut gone, 0, RefinePolicy::default()).unwrap();
        assert!(out.failed && out.mask == initial);
    }
}

// ---- segment_modality ----------------------------------------------------

fn tumor_case(seed: u64) -> (MultimodalVolume, MultimodalVolume, uadseg::Phantom) {
    let mut spec = PhantomSpec::tumor(seed);
    spec.dims = Dims::new(32, 48, 48);
    spec.tumor_geometry.et_radius = (2.0, 2.5);
    let ph = generate_phantom(&spec).unwrap();
    let (norm, _) = zscore_normalize(&ph.volume);
    // A stand-in reconstruction that knows the healthy tissue level: the
    // volume with tumour voxels replaced by healthy intensity.
    let dims = norm.dims();
    let mut recon = norm.data().to_vec();
    for (c, _) in norm.modalities().iter().enumerate() {
        let ch = &norm.data()[c * dims.voxels()..(c + 1) * dims.voxels()];
        let healthy: Vec<f32> = (0..dims.voxels())
            .filter(|&i| ph.brain[i] && ph.labels.data()[i] == 0)
            .map(|i| ch[i])
            .collect();
        let level = healthy.iter().sum::<f32>() / healthy.len() as f32;
        for i in 0..dims.voxels() {
            if ph.labels.data()[i] != 0 {
                recon[c * dims.voxels() + i] = level;
            }
        }
    }
    let recon = norm.with_data(recon).unwrap();
    (norm, recon, ph)
}

#[test]
fn identical_reconstruction_gives_empty_mask() {
    let (norm, _, _) = tumor_case(1);
    let st = segment_modality(&norm, &norm, Modality::T1c, None, &PostprocConfig::default(), 0).unwrap();
    assert!(st.mask().is_empty());
    assert_eq!(st.tau, 1.2);
}

#[test]
fn stages_are_monotone_and_recompose() {
    let (norm, recon, ph) = tumor_case(2);
    let cfg = PostprocConfig::default();
    let dims = norm.dims();
    for m in [Modality::T1c, Modality::T2f] {
        let mut refiner = BuiltinRefiner::default();
        let st = segment_modality(&norm, &recon, m, Some(&mut refiner), &cfg, 9).unwrap();
        let support = BinaryMask3D::from_vec(dims, st.residual.iter().map(|&v| v >= st.tau).collect()).unwrap();
        let thr = BinaryMask3D::from_vec(dims, st.thresholded.iter().map(|&v| v != 0.0).collect()).unwrap();
        assert_eq!(thr, support);
        assert!(st.otsu.is_subset_of(&support));
        assert!(st.component.is_subset_of(&st.morph));
        assert!(!st.component.is_empty(), "{m}: tumour missed");
        let (_, comps) = label_components_3d(st.mask());
        assert_eq!(comps.len(), 1);
        let gt = BinaryMask3D::from_labels(
            &ph.labels,
            if m == Modality::T1c {
                &[LABEL_ET]
            } else {
                &[LABEL_ET, LABEL_SNFH]
            },
        );
        assert!(dice(st.mask().data(), gt.data()) > 0.0, "{m}");

        // Re-running the remaining stages from any intermediate reproduces the output.
        let image = norm.modality(m).unwrap();
        let idx = norm.position(m).unwrap();
        let finish = |comp: &BinaryMask3D| {
            refine_volume(image, comp, &mut BuiltinRefiner::default(), &cfg, |z| {
                slice_seed(9, idx, z)
            })
            .unwrap()
            .0
        };
        let (t, _) = threshold(&st.residual, cfg.threshold_fraction, cfg.threshold_floor);
        assert_eq!(t, st.thresholded);
        let from_thr = largest_component_3d(&morph_clean(&otsu_binarize(&st.thresholded, dims).unwrap()));
        assert_eq!(finish(&from_thr), st.refined);
        assert_eq!(finish(&largest_component_3d(&morph_clean(&st.otsu))), st.refined);
        assert_eq!(finish(&largest_component_3d(&st.morph)), st.refined);
        assert_eq!(finish(&st.component), st.refined);
        assert!(!st.refinements.is_empty());
    }
}

#[test]
fn echo_refiner_changes_nothing() {
    struct Echo;
    impl RegionRefiner for Echo {
        fn refine(&mut self, req: &RefineRequest<'_>) -> uadseg::Result<RefinerReply> {
            Ok(RefinerReply {
                mask: req.initial.to_vec(),
                confidence: 1.0,
            })
        }
    }
    let (norm, recon, _) = tumor_case(4);
    let cfg = PostprocConfig::default();
    let off = segment_modality(&norm, &recon, Modality::T2f, None, &cfg, 0).unwrap();
    let on = segment_modality(&norm, &recon, Modality::T2f, Some(&mut Echo), &cfg, 0).unwrap();
    assert_eq!(off.mask(), on.mask());
    assert!(on.refinements.iter().all(|(_, o)| o.accepted));
}

#[test]
fn segmentation_is_deterministic() {
    let (norm, recon, _) = tumor_case(5);
    let cfg = PostprocConfig::default();
    let a = segment_modality(
        &norm,
        &recon,
        Modality::T1c,
        Some(&mut BuiltinRefiner::default()),
        &cfg,
        3,
    )
    .unwrap();
    let b = segment_modality(
        &norm,
        &recon,
        Modality::T1c,
        Some(&mut BuiltinRefiner::default()),
        &cfg,
        3,
    )
    .unwrap();
    assert_eq!(a, b);
}

#[test]
fn postproc_config_validation() {
    assert!(PostprocConfig::default().validate().is_ok());
    let cfg: PostprocConfig = serde_json::from_str(r#"{"refiner": "off", "connectivity": 6}"#).unwrap();
    assert_eq!(cfg.refiner, RefinerMode::Off);
    assert!(serde_json::from_str::<PostprocConfig>(r#"{"gate": 0.5}"#).is_err());
    for bad in [
        PostprocConfig {
            connectivity: 8,
            ..Default::default()
        },
        PostprocConfig {
            max_attempts: 0,
            ..Default::default()
        },
        PostprocConfig {
            confidence_gate: 1.5,
            ..Default::default()
        },
        PostprocConfig {
            refiner: RefinerMode::External,
            ..Default::default()
        },
    ] {
        assert!(bad.validate().unwrap_err().is_config());
    }
}

// ---- fusion --------------------------------------------------------------

fn ball(dims: Dims, r: f64) -> BinaryMask3D {
    let c = |n: usize| (n as f64 - 1.0) / 2.0;
    mask(dims, |z, y, x| {
        let (a, b, e) = (z as f64 - c(dims.d), y as f64 - c(dims.h), x as f64 - c(dims.w));
        (a * a + b * b + e * e).sqrt() <= r
    })
}

#[test]
fn fusion_examples() {
    let dims = Dims::new(17, 17, 17);
    let empty = BinaryMask3D::zeros(dims);
    assert!(fuse_masks(&empty, &empty).unwrap().is_empty());

    let inner = ball(dims, 3.0);
    let outer = ball(dims, 6.0);
    let labels = fuse_masks(&inner, &outer).unwrap();
    assert_eq!(BinaryMask3D::from_labels(&labels, &[LABEL_ET]), inner);
    assert_eq!(
        BinaryMask3D::from_labels(&labels, &[LABEL_SNFH]),
        outer.and_not(&inner).unwrap()
    );
    assert_eq!(labels.count(LABEL_NET), 0);

    // T2f bright everywhere except the cavity enclosed by the T1c shell.
    let shell = ball(dims, 5.0).and_not(&ball(dims, 3.0)).unwrap();
    let labels = fuse_masks(&shell, &ball(dims, 6.0).and_not(&ball(dims, 3.0)).unwrap()).unwrap();
    let filled: Vec<bool> = (0..dims.d)
        .flat_map(|z| holes_oracle(shell.slice(z), dims.h, dims.w))
        .collect();
    let cavity: Vec<bool> = filled.iter().zip(shell.data()).map(|(&f, &s)| f && !s).collect();
    assert_eq!(BinaryMask3D::from_labels(&labels, &[LABEL_NET]).data(), &cavity[..]);
    assert!(labels.count(LABEL_NET) > 0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn fusion_algebra(a in prop::collection::vec(any::<bool>(), 4 * 9 * 9), b in prop::collection::vec(any::<bool>(), 4 * 9 * 9)) {
        let dims = Dims::new(4, 9, 9);
        let t1c = BinaryMask3D::from_vec(dims, a).unwrap();
        let t2f = BinaryMask3D::from_vec(dims, b).unwrap();
        let labels = fuse_masks(&t1c, &t2f).unwrap();
        let et = BinaryMask3D::from_labels(&labels, &[LABEL_ET]);
        let net = BinaryMask3D::from_labels(&labels, &[LABEL_NET]);
        let snfh = BinaryMask3D::from_labels(&labels, &[LABEL_SNFH]);
        let tc = BinaryMask3D::from_labels(&labels, &[LABEL_NET, LABEL_ET]);
        let wt = BinaryMask3D::from_labels(&labels, &[LABEL_NET, LABEL_SNFH, LABEL_ET]);
        prop_assert_eq!(&et, &t1c);
        prop_assert!(et.and(&net).unwrap().is_empty() && et.and(&snfh).unwrap().is_empty() && net.and(&snfh).unwrap().is_empty());
        prop_assert_eq!(&et.or(&net).unwrap(), &tc);
        prop_assert_eq!(&tc.or(&snfh).unwrap(), &wt);
        prop_assert!(et.is_subset_of(&tc) && tc.is_subset_of(&wt));
        prop_assert!(net.is_subset_of(&fill_holes_per_slice(&et.or(&snfh).unwrap())));
        prop_assert!(t1c.or(&t2f).unwrap().is_subset_of(&wt));
    }
}

#[test]
fn fusion_shape_mismatch() {
    let a = BinaryMask3D::zeros(Dims::new(2, 2, 2));
    let b = BinaryMask3D::zeros(Dims::new(2, 2, 3));
    assert!(matches!(fuse_masks(&a, &b), Err(Error::ShapeMismatch { .. })));
}
