//! Randomised invariants.

use proptest::prelude::*;

use dcnet::diffusion::{q_sample, NoiseSchedule};
use dcnet::embeddings::{rope_apply_1d, rope_apply_2d, ConditionKind, RotaryTable};
use dcnet::harness::eval::EvalReport;
use dcnet::intra::cross_normalize;
use dcnet::records::TensorRecord;
use dcnet::scene::{decompose_elements, extract_conditions, generate_scene, render_scene, silhouette, Image, CANVAS, NEUTRAL};
use dcnet::training::{foreground_weight_mask, mse_loss, transform_loss};
use dcnet::{Rng, Tensor};

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_sum_to_one(rows in 1usize..5, cols in 1usize..9, scale in 0.0f64..500.0, seed in any::<u64>()) {
        let x = Tensor::<f64>::randn(&[rows, cols], scale, &mut Rng::new(seed));
        let y = x.softmax(1).unwrap().to_vec();
        for r in y.chunks(cols) {
            prop_assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            prop_assert!(r.iter().all(|v| v.is_finite() && *v >= 0.0));
        }
        let y32 = Tensor::<f32>::randn(&[rows, cols], scale, &mut Rng::new(seed)).softmax(1).unwrap().to_f64_vec();
        for r in y32.chunks(cols) {
            prop_assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn rope_2d_is_an_isometry(quarter in 1usize..5, positions in prop::collection::vec((0usize..40, 0usize..40), 1..8), seed in any::<u64>()) {
        let dim = 4 * quarter;
        let x = Tensor::<f64>::randn(&[positions.len(), dim], 2.0, &mut Rng::new(seed));
        let y = rope_apply_2d(&x, &positions, 10_000.0).unwrap();
        for (a, b) in x.to_vec().chunks(dim).zip(y.to_vec().chunks(dim)) {
            let (na, nb) = (a.iter().map(|v| v * v).sum::<f64>().sqrt(), b.iter().map(|v| v * v).sum::<f64>().sqrt());
            prop_assert!((na - nb).abs() < 1e-6);
        }
        let table = RotaryTable::grid_2d(dim, &positions, 10_000.0).unwrap();
        let back = table.apply_inverse(&y).unwrap().to_vec();
        prop_assert!(back.iter().zip(x.to_vec()).all(|(a, b)| (a - b).abs() < 1e-6));
    }

    #[test]
    fn rope_1d_is_an_isometry(half in 1usize..5, orders in prop::collection::vec(0usize..8, 1..6), seed in any::<u64>()) {
        let dim = 2 * half;
        let x = Tensor::<f64>::randn(&[orders.len(), dim], 1.0, &mut Rng::new(seed));
        let y = rope_apply_1d(&x, &orders, 10_000.0).unwrap();
        for (a, b) in x.to_vec().chunks(dim).zip(y.to_vec().chunks(dim)) {
            let (na, nb) = (a.iter().map(|v| v * v).sum::<f64>(), b.iter().map(|v| v * v).sum::<f64>());
            prop_assert!((na.sqrt() - nb.sqrt()).abs() < 1e-6);
        }
    }

    #[test]
    fn cross_normalize_takes_reference_statistics(
        n in 1usize..12, m in 1usize..12, c in 1usize..5,
        spread in 0.0f64..10.0, shift in -20.0f64..20.0, flat in any::<bool>(), seed in any::<u64>()
    ) {
        let mut rng = Rng::new(seed);
        let h = if flat { Tensor::<f64>::full(&[1, n, c], shift) } else { Tensor::<f64>::randn(&[1, n, c], spread, &mut rng).add_scalar(shift) };
        let r = Tensor::<f64>::randn(&[1, m, c], 3.0, &mut rng).add_scalar(-shift);
        let out = cross_normalize(&h, &r).unwrap().to_vec();
        prop_assert!(out.iter().all(|v| v.is_finite()));
        let stat = |v: &[f64], len: usize, ch: usize| {
            let mu = (0..len).map(|i| v[i * c + ch]).sum::<f64>() / len as f64;
            let sd = ((0..len).map(|i| (v[i * c + ch] - mu).powi(2)).sum::<f64>() / len as f64).sqrt();
            (mu, sd)
        };
        let hv = h.to_vec();
        for ch in 0..c {
            let (mo, so) = stat(&out, n, ch);
            let (mr, sr) = stat(&r.to_vec(), m, ch);
            prop_assert!((mo - mr).abs() < 1e-5);
            // a (near) constant channel has nothing to rescale
            if stat(&hv, n, ch).1 > 1e-3 {
                prop_assert!((so - sr).abs() < 1e-5, "{so} vs {sr}");
            } else {
                prop_assert!(so < 1e-5 + sr);
            }
        }
    }

    #[test]
    fn weight_mask_normalisation(bits in prop::collection::vec(any::<bool>(), 64)) {
        let m = foreground_weight_mask(&bits, 8, 8).unwrap();
        let fg = bits.iter().filter(|&&b| b).count();
        let fg_sum: f64 = m.values.iter().zip(&bits).filter(|(_, &b)| b).map(|(v, _)| v).sum();
        if fg > 0 {
            prop_assert!((fg_sum - 64.0).abs() < 1e-9);
            prop_assert!(m.foreground_weight() >= 1.0);
        } else {
            prop_assert!(m.values.iter().all(|&v| v == 1.0));
        }
        let exact = m.values.iter().zip(&bits).all(|(&v, &b)| if b { v == 64.0 / fg as f64 } else { v == 1.0 });
        prop_assert!(exact);
        let pooled = m.downsample(4).unwrap();
        let total: f64 = pooled.values.iter().sum::<f64>() * 4.0;
        prop_assert!((total - m.values.iter().sum::<f64>()).abs() < 1e-9);
    }

    #[test]
    fn losses_are_nonnegative_and_vanish_on_equality(seed in any::<u64>(), bits in prop::collection::vec(any::<bool>(), 16)) {
        let mut rng = Rng::new(seed);
        let a = Tensor::<f64>::randn(&[2, 4, 4, 3], 1.0, &mut rng);
        let b = Tensor::<f64>::randn(&[2, 4, 4, 3], 1.0, &mut rng);
        let m = foreground_weight_mask(&bits, 4, 4).unwrap().to_tensor::<f64>();
        prop_assert_eq!(mse_loss(&a, &a, &m).unwrap().item().unwrap(), 0.0);
        prop_assert!(mse_loss(&a, &b, &m).unwrap().item().unwrap() > 0.0);
        let h = vec![a.clone()];
        prop_assert_eq!(transform_loss(&h, &h, &[m.clone()]).unwrap().item().unwrap(), 0.0);
        prop_assert!(transform_loss(&h, &[b], &[m]).unwrap().item().unwrap() > 0.0);
    }

    #[test]
    fn schedule_is_monotone(steps in 2usize..400, b0 in 1e-5f64..1e-2, span in 0.0f64..0.2) {
        let s = NoiseSchedule::linear(steps, b0, b0 + span).unwrap();
        let mut prod = 1.0;
        for t in 1..=steps {
            prop_assert!(s.beta(t).unwrap() > 0.0 && s.beta(t).unwrap() < 1.0);
            if t > 1 {
                prop_assert!(s.beta(t).unwrap() >= s.beta(t - 1).unwrap());
                prop_assert!(s.alpha_bar(t).unwrap() < s.alpha_bar(t - 1).unwrap());
            }
            prod *= 1.0 - s.beta(t).unwrap();
            prop_assert!((s.alpha_bar(t).unwrap() - prod).abs() < 1e-12);
        }
        prop_assert!(s.alpha_bar(0).is_ok() && s.alpha_bar(steps + 1).is_err());
    }

    #[test]
    fn q_sample_is_the_closed_form(t in 1usize..=200, seed in any::<u64>()) {
        let s = NoiseSchedule::linear(200, 1e-4, 2e-2).unwrap();
        let mut rng = Rng::new(seed);
        let z0 = Tensor::<f64>::randn(&[1, 2, 2, 3], 1.0, &mut rng);
        let eps = Tensor::<f64>::randn(&[1, 2, 2, 3], 1.0, &mut rng);
        let zt = q_sample(&s, &z0, &[t], &eps).unwrap().to_vec();
        let ab = s.alpha_bar(t).unwrap();
        for ((z, x), e) in zt.iter().zip(z0.to_vec()).zip(eps.to_vec()) {
            prop_assert!((z - (ab.sqrt() * x + (1.0 - ab).sqrt() * e)).abs() < 1e-12);
        }
    }

    #[test]
    fn tensor_records_round_trip(shape in prop::collection::vec(1usize..5, 0..4), seed in any::<u64>(), name in "[a-z.]{1,20}") {
        let t = Tensor::<f32>::randn(&shape, 1.0, &mut Rng::new(seed));
        let rec = TensorRecord::from_tensor(&name, &t);
        let mut bytes = Vec::new();
        rec.write_to(&mut bytes).unwrap();
        prop_assert_eq!(bytes.len(), rec.encoded_len());
        let back = TensorRecord::read_from(&mut bytes.as_slice()).unwrap();
        prop_assert_eq!(&back, &rec);
        prop_assert_eq!(back.to_tensor::<f32>().unwrap().to_vec(), t.to_vec());
    }

    #[test]
    fn eval_reports_round_trip(acc in 0.0f64..=1.0, iou in 0.0f64..=1.0, fid in 0.0f64..=1.0, scenes in 0usize..500, label in "[a-z_]{1,12}") {
        let r = EvalReport { label, scenes, samples: 2 * scenes, occlusion_accuracy: acc, layout: ConditionKind::Mask, iou, color_fidelity: fid };
        prop_assert_eq!(EvalReport::from_kv(&r.to_kv()).unwrap(), r);
    }

    #[test]
    fn same_seed_same_stream(seed in any::<u64>(), stream in any::<u64>()) {
        let (mut a, mut b) = (Rng::new(seed).fork(stream), Rng::new(seed).fork(stream));
        for _ in 0..32 {
            prop_assert_eq!(a.next_u64(), b.next_u64());
        }
        let (s, st, pos) = a.state();
        let mut c = Rng::from_state(s, st, pos);
        prop_assert_eq!(a.normal().to_bits(), c.normal().to_bits());
    }
}

fn boundary(mask: &[bool]) -> Vec<bool> {
    let n = CANVAS as i32;
    (0..mask.len())
        .map(|i| {
            let (y, x) = ((i / CANVAS) as i32, (i % CANVAS) as i32);
            mask[i]
                && (-1..=1).any(|dy| {
                    (-1..=1).any(|dx| {
                        let (yy, xx) = (y + dy, x + dx);
                        yy < 0 || xx < 0 || yy >= n || xx >= n || !mask[(yy * n + xx) as usize]
                    })
                })
        })
        .collect()
}

fn near(set: &[bool], i: usize) -> bool {
    let (y, x) = ((i / CANVAS) as i32, (i % CANVAS) as i32);
    (-1..=1).any(|dy| {
        (-1..=1).any(|dx| {
            let (yy, xx) = (y + dy, x + dx);
            yy >= 0 && xx >= 0 && yy < CANVAS as i32 && xx < CANVAS as i32 && set[(yy * CANVAS as i32 + xx) as usize]
        })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn generated_scenes_are_consistent(seed in any::<u64>()) {
        let spec = generate_scene(&mut Rng::new(seed));
        prop_assert!(spec.validate().is_ok());
        prop_assert_eq!(&spec, &generate_scene(&mut Rng::new(seed)));
        let target = render_scene(&spec);
        let dec = decompose_elements(&spec);
        // recompose solos back to front
        let mut recomposed = dec.background.clone();
        for i in spec.z_sorted() {
            let sil = silhouette(&spec.elements[i]);
            for (p, _) in sil.iter().enumerate().filter(|(_, &m)| m) {
                recomposed.set_pixel(p / CANVAS, p % CANVAS, dec.solos[i].pixel(p / CANVAS, p % CANVAS));
            }
        }
        prop_assert_eq!(&recomposed, &target);
        prop_assert!(dec.background.data.chunks(3).all(|px| px == spec.background.color()));

        let cs = extract_conditions(&spec);
        for (e, c) in spec.elements.iter().zip(&cs.elements) {
            let sil = silhouette(e);
            prop_assert_eq!(c.mask.mask(), sil.clone());
            let (bx, dot) = (c.boxmap.mask(), c.dot.mask());
            prop_assert!(sil.iter().zip(&bx).all(|(&m, &b)| !m || b));
            prop_assert_eq!(dot.iter().filter(|&&d| d).count(), 1);
            prop_assert!(dot.iter().zip(&bx).all(|(&d, &b)| !d || b));
            prop_assert!(bx.iter().filter(|&&b| b).count() >= sil.iter().filter(|&&m| m).count());
            // edges of the canonical render hug the canonical silhouette
            let canon = c.solo.shifted(c.offset.0, c.offset.1);
            let canon_mask: Vec<bool> = canon.data.chunks(3).map(|px| px != NEUTRAL).collect();
            let b = boundary(&canon_mask);
            for (i, _) in c.edge.mask().iter().enumerate().filter(|(_, &on)| on) {
                prop_assert!(near(&b, i), "edge pixel {i} away from the outline");
            }
            let flat_fill = c.color.data.chunks(3).zip(&canon_mask).all(|(px, &m)| if m { px == e.rgb() } else { px == NEUTRAL });
            prop_assert!(flat_fill);
        }
        // overlap pixels show the higher element
        for i in 0..spec.elements.len() {
            for j in 0..spec.elements.len() {
                if spec.elements[i].z <= spec.elements[j].z {
                    continue;
                }
                let (si, sj) = (silhouette(&spec.elements[i]), silhouette(&spec.elements[j]));
                for p in (0..CANVAS * CANVAS).filter(|&p| si[p] && sj[p]) {
                    let covered_higher = spec.elements.iter().any(|e| e.z > spec.elements[i].z && silhouette(e)[p]);
                    if !covered_higher {
                        prop_assert_eq!(target.pixel(p / CANVAS, p % CANVAS), &spec.elements[i].rgb()[..]);
                    }
                }
            }
        }
    }
}

#[test]
fn element_counts_cover_one_to_four() {
    let mut seen = [0usize; 5];
    let mut overlapping_multi = (0usize, 0usize);
    for seed in 0..1000 {
        let spec = generate_scene(&mut Rng::new(seed));
        spec.validate().unwrap();
        seen[spec.elements.len()] += 1;
        if spec.elements.len() > 1 {
            overlapping_multi.1 += 1;
            let sils: Vec<Vec<bool>> = spec.elements.iter().map(silhouette).collect();
            let overlaps = (0..sils.len()).any(|i| (i + 1..sils.len()).any(|j| sils[i].iter().zip(&sils[j]).any(|(a, b)| *a && *b)));
            overlapping_multi.0 += overlaps as usize;
        }
    }
    assert_eq!(seen[0], 0);
    assert!(seen[1..].iter().all(|&n| n > 0), "{seen:?}");
    let frac = overlapping_multi.0 as f64 / overlapping_multi.1 as f64;
    assert!(frac >= 0.45, "overlap fraction {frac}");
}

#[test]
fn disjoint_pair_renders_as_union_of_solos() {
    let mut spec = generate_scene(&mut Rng::new(3));
    spec.elements.truncate(1);
    let mut second = spec.elements[0].clone();
    spec.elements[0].cx = 8.0;
    spec.elements[0].cy = 8.0;
    spec.elements[0].scale = 8.0;
    second.cx = 24.0;
    second.cy = 24.0;
    second.scale = 8.0;
    second.z = spec.elements[0].z + 1;
    spec.elements.push(second);
    spec.validate().unwrap();
    let target = render_scene(&spec);
    let dec = decompose_elements(&spec);
    for p in 0..CANVAS * CANVAS {
        let (y, x) = (p / CANVAS, p % CANVAS);
        let from: Vec<&Image> = dec.solos.iter().filter(|s| s.pixel(y, x) != NEUTRAL).collect();
        match from.as_slice() {
            [] => assert_eq!(target.pixel(y, x), spec.background.color()),
            [s] => assert_eq!(target.pixel(y, x), s.pixel(y, x)),
            _ => panic!("solos overlap at {p}"),
        }
    }
}
