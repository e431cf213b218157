use ivc_core::context::{extract_context, ContextNet, ContextNetConfig, Level};
use ivc_core::interp::{InterpCodec, InterpCodecConfig, InterpModelSpec, InterpolationNet, InterpolationNetConfig};
use ivc_core::motion::{warp_features, warp_image, MotionField, MotionPair};
use ivc_core::train::hflip;
use ivc_tensor::{ParamStore, Tape, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn lattice(h: usize, w: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(&[3, h, w], |_| rng.gen::<u8>() as f32 / 255.0)
}

fn codec(spec: InterpModelSpec, seed: u64) -> InterpCodec {
    InterpCodec::new(InterpCodecConfig::toy(spec), seed).unwrap()
}

/// Zeroes every parameter whose name starts with `prefix`.
fn silence(ps: &mut ParamStore, prefix: &str) {
    let hits: Vec<usize> = ps.iter().enumerate().filter(|(_, (n, _))| n.starts_with(prefix)).map(|(i, _)| i).collect();
    assert!(!hits.is_empty(), "no parameters under {prefix}");
    for i in hits {
        let t = ps.value_mut(i);
        *t = t.map(|_| 0.0);
    }
}

#[test]
fn context_pyramid_has_the_documented_resolutions() {
    let mut ps = ParamStore::new();
    let net = ContextNet::new(&mut ps, "", ContextNetConfig::toy(), &mut ChaCha8Rng::seed_from_u64(1));
    let img = lattice(64, 64, 1);
    let f = extract_context(&net, &ps, &img).unwrap();
    let sizes: Vec<(usize, usize)> = f.levels.iter().map(|t| (t.shape()[2], t.shape()[3])).collect();
    assert_eq!(sizes, vec![(8, 8), (16, 16), (32, 32), (64, 64)]);
    for level in Level::ALL {
        assert_eq!(f.levels[level.index()].shape()[1], ContextNetConfig::toy().channels(level));
    }
    assert_eq!(f.image, img);

    // Identical inputs agree; a flipped input is recomputed, not cached.
    assert_eq!(extract_context(&net, &ps, &img.clone()).unwrap(), f);
    let flipped = extract_context(&net, &ps, &hflip(&img)).unwrap();
    assert_ne!(flipped.levels[2], f.levels[2]);
    assert_eq!(extract_context(&net, &ps, &img).unwrap(), f);
}

#[test]
fn specs_carry_their_rates_and_flip_is_an_involution() {
    assert_eq!(InterpModelSpec::m12().bpp_per_iteration(), 0.03125);
    assert_eq!(InterpModelSpec::m33().bpp_per_iteration(), 0.0625);
    assert_eq!(InterpModelSpec::m66().bpp_per_iteration(), 0.0625);
    for spec in [InterpModelSpec::m12(), InterpModelSpec::m33(), InterpModelSpec::m66()] {
        assert_eq!(spec.flip().flip(), spec);
        assert!(spec.validate().is_ok() && spec.flip().validate().is_ok());
    }
    let m21 = InterpModelSpec::m12().flip();
    assert_eq!((m21.past, m21.future, m21.bits), (2, 1, 8));

    let bad = |f: fn(&mut InterpModelSpec)| {
        let mut s = InterpModelSpec::m33();
        f(&mut s);
        s.validate().is_err()
    };
    assert!(bad(|s| s.past = 0));
    assert!(bad(|s| s.bits = 32));
    assert!(bad(|s| s.future = 4));
    assert!(bad(|s| s.dec_fusion.push(Level::Full)));
}

#[test]
fn codes_are_deterministic_and_sized_by_k_l_and_grid() {
    let c = codec(InterpModelSpec::m33(), 2);
    let spec = InterpModelSpec::m33();
    let (a, t, b) = (lattice(32, 48, 1), lattice(32, 48, 2), lattice(32, 48, 3));
    let motion =
        MotionPair { past: MotionField::uniform(48, 32, 2, 1).unwrap(), future: MotionField::zero(48, 32, 16, 16) };
    let (code, recon) = c.encode_interp(&t, &a, &b, &motion, &spec, 3).unwrap();
    assert_eq!(code.bit_count(), 3 * 16 * 2 * 3);
    assert_eq!(code.bpp(32, 48), 3.0 * 0.0625);
    let (again, recon2) = c.encode_interp(&t, &a, &b, &motion, &spec, 3).unwrap();
    assert_eq!((&code, &recon), (&again, &recon2));
    assert_eq!(c.decode_interp(&code, &a, &b, &motion, &spec).unwrap(), recon);
    let steps = c.decode_progressive(&code, &a, &b, &motion, &spec).unwrap();
    assert_eq!(steps.len(), 3);
    assert_eq!(c.decode_interp(&code.prefix(2), &a, &b, &motion, &spec).unwrap(), steps[1]);
}

#[test]
fn flipped_orientation_shares_weights_and_code_size() {
    let c = codec(InterpModelSpec::m12(), 3);
    let (m12, m21) = (InterpModelSpec::m12(), InterpModelSpec::m12().flip());
    let (i1, i2, i3, i4) = (lattice(32, 32, 1), lattice(32, 32, 2), lattice(32, 32, 3), lattice(32, 32, 4));
    let motion = MotionPair {
        past: MotionField::uniform(32, 32, 1, 0).unwrap(),
        future: MotionField::uniform(32, 32, 0, -2).unwrap(),
    };
    let (fwd, _) = c.encode_interp(&i2, &i1, &i4, &motion, &m12, 2).unwrap();
    let (bwd, _) = c.encode_interp(&i3, &i1, &i4, &motion, &m21, 2).unwrap();
    assert_eq!(fwd.bit_count(), bwd.bit_count());
    // Flipping the orientation is exactly exchanging the references.
    let (swapped, r1) = c.encode_interp(&i3, &i4, &i1, &motion.swapped(), &m12, 2).unwrap();
    let (_, r2) = c.encode_interp(&i3, &i1, &i4, &motion, &m21, 2).unwrap();
    assert_eq!((swapped, r1), (bwd, r2));
    // Other distances are refused.
    assert!(c.encode_interp(&i2, &i1, &i4, &motion, &InterpModelSpec::m33(), 1).is_err());
}

#[test]
fn mismatched_inputs_are_rejected() {
    let c = codec(InterpModelSpec::m66(), 4);
    let spec = InterpModelSpec::m66();
    let m = MotionPair::zero(32, 32);
    let (a, b) = (lattice(32, 32, 1), lattice(32, 32, 2));
    assert!(c.encode_interp(&lattice(32, 48, 3), &a, &b, &m, &spec, 1).is_err());
    assert!(c.encode_interp(&a, &a, &lattice(48, 32, 3), &m, &spec, 1).is_err());
    assert!(c.encode_interp(&a, &a, &b, &m, &spec, 0).is_err());
    assert!(c.encode_interp(&a, &a, &b, &m, &spec, 17).is_err());
}

#[test]
fn with_a_silent_decoder_the_frame_is_the_motion_compensated_average() {
    let mut c = codec(InterpModelSpec::m33(), 5);
    silence(c.params_mut(), "to_image");
    let spec = InterpModelSpec::m33();
    let (a, t) = (lattice(32, 32, 1), lattice(32, 32, 2));
    // Identical references and zero motion: a conditional image codec whose
    // starting point is the reference itself.
    let (_, recon) = c.encode_interp(&t, &a, &a, &MotionPair::zero(32, 32), &spec, 2).unwrap();
    assert_eq!(recon, a);
    // A shared shift warps both references the same way.
    let shift = MotionField::uniform(32, 32, 2, -1).unwrap();
    let motion = MotionPair { past: shift.clone(), future: shift.clone() };
    let (code, recon) = c.encode_interp(&t, &a, &a, &motion, &spec, 1).unwrap();
    assert_eq!(recon, warp_image(&a, &shift).unwrap());
    assert_eq!(c.decode_interp(&code, &a, &a, &motion, &spec).unwrap(), recon);
}

#[test]
fn blind_interpolation_keeps_the_shape_and_a_silent_head_gives_the_mean() {
    let mut net = InterpolationNet::new(InterpolationNetConfig { context: ContextNetConfig::toy(), motion: false }, 6);
    let (a, b) = (lattice(32, 48, 1), lattice(32, 48, 2));
    let out = net.interpolate(&a, &b, &MotionPair::zero(48, 32)).unwrap();
    assert_eq!(out.shape(), a.shape());
    silence(net.params_mut(), "d.out");
    let out = net.interpolate(&a, &b, &MotionPair::zero(48, 32)).unwrap();
    let mean = Tensor::from_fn(a.shape(), |i| {
        let v = (a.data()[i] + b.data()[i]) / 2.0;
        (v * 255.0).round() / 255.0
    });
    assert_eq!(out, mean);
}

fn features(c: usize, h: usize, w: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(&[1, c, h, w], |_| rng.gen::<f32>())
}

fn warp(f: &Tensor, factor: usize, field: &MotionField) -> Tensor {
    let mut tape = Tape::new();
    let v = tape.constant(f.clone());
    let out = warp_features(&mut tape, v, factor, &[field]).unwrap();
    tape.value(out).clone()
}

#[test]
fn feature_warps_scale_displacements_by_level() {
    // (4, 0) at full resolution is a shift of 2 at half resolution.
    let field = MotionField::uniform(64, 32, 4, 0).unwrap();
    let f = features(3, 16, 32, 1);
    let out = warp(&f, 2, &field);
    for c in 0..3 {
        for y in 0..16 {
            for x in 2..32 {
                let at = |t: &Tensor, x: usize| t.data()[(c * 16 + y) * 32 + x];
                assert_eq!(at(&out, x), at(&f, x - 2), "({c}, {y}, {x})");
            }
        }
    }
    // At full resolution on an image, feature and pixel warps agree.
    let img = lattice(32, 64, 2);
    let batched = img.clone().reshape(&[1, 3, 32, 64]).unwrap();
    let field = MotionField::uniform(64, 32, -3, 2).unwrap();
    assert_eq!(warp(&batched, 1, &field).data(), warp_image(&img, &field).unwrap().data());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn zero_fields_leave_every_level_unchanged(factor in prop::sample::select(vec![1usize, 2, 4, 8]), seed in any::<u64>()) {
        let f = features(2, 64 / factor, 32 / factor, seed);
        prop_assert_eq!(warp(&f, factor, &MotionField::zero(32, 64, 16, 16)), f);
    }
}
