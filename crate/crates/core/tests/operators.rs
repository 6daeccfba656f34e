use matchsearch::operators::{
    affinity, dw_xcorr, film, guidance_map, pairwise_relation, pointwise_add, simple_transformer, transductive_guidance,
    PairVars,
};
use matchsearch::tensor::Init;
use matchsearch::{BBox, FeaturePair, Tape, Tensor};

fn rand(shape: &[usize], seed: u64) -> Tensor<f64> {
    Tensor::create(shape, Init::SeededUniform { seed, lo: -1.0, hi: 1.0 }).unwrap()
}

fn pair(hz: usize, wz: usize, hx: usize, wx: usize, c: usize, seed: u64) -> FeaturePair<f64> {
    FeaturePair::new(
        rand(&[hz, wz, c], seed),
        rand(&[hx, wx, c], seed + 1),
        BBox::new(0.0, 0.0, wz as f64, hz as f64),
    )
    .unwrap()
}

fn at(t: &Tensor<f64>, r: usize, c: usize, k: usize) -> f64 {
    let s = t.shape();
    t.data()[(r * s[1] + c) * s[2] + k]
}

/// Naive zero-padded depthwise correlation, offsets `-(k-1)/2 ..= k/2`.
fn xcorr_oracle(x: &Tensor<f64>, z: &Tensor<f64>) -> Vec<f64> {
    let (hx, wx, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (hz, wz) = (z.shape()[0], z.shape()[1]);
    let (oy, ox) = ((hz as i64 - 1) / 2, (wz as i64 - 1) / 2);
    let mut out = vec![0.0; hx * wx * c];
    for r in 0..hx {
        for col in 0..wx {
            for k in 0..c {
                let mut acc = 0.0;
                for i in 0..hz {
                    for j in 0..wz {
                        let (rr, cc) = (r as i64 + i as i64 - oy, col as i64 + j as i64 - ox);
                        if rr >= 0 && cc >= 0 && (rr as usize) < hx && (cc as usize) < wx {
                            acc += at(x, rr as usize, cc as usize, k) * at(z, i, j, k);
                        }
                    }
                }
                out[(r * wx + col) * c + k] = acc;
            }
        }
    }
    out
}

#[test]
fn xcorr_matches_naive_loops() {
    for (hz, wz) in [(3, 3), (2, 4), (1, 1), (4, 4)] {
        let p = pair(hz, wz, 5, 6, 3, 40 + hz as u64);
        let mut tape = Tape::new();
        let v = p.record(&mut tape, false);
        let raw = dw_xcorr(&mut tape, &v, false).unwrap();
        let mean = dw_xcorr(&mut tape, &v, true).unwrap();
        let want = xcorr_oracle(&p.fx, &p.fz);
        let area = (hz * wz) as f64;
        for (i, w) in want.iter().enumerate() {
            assert!((tape.value(raw).data()[i] - w).abs() < 1e-12);
            assert!((tape.value(mean).data()[i] - w / area).abs() < 1e-12);
        }
    }
}

#[test]
fn xcorr_of_single_cell_exemplar_is_hadamard() {
    let p = pair(1, 1, 4, 5, 6, 7);
    for mean in [false, true] {
        let mut tape = Tape::new();
        let v = p.record(&mut tape, false);
        let r = dw_xcorr(&mut tape, &v, mean).unwrap();
        for (i, &x) in p.fx.data().iter().enumerate() {
            let want = x * p.fz.data()[i % 6];
            assert!((tape.value(r).data()[i] - want).abs() <= 1e-12);
        }
    }
}

#[test]
fn pointwise_add_uses_box_mean() {
    let mut p = pair(4, 4, 3, 3, 2, 2);
    p = FeaturePair::new(p.fz, p.fx, BBox::new(1.0, 1.0, 3.0, 2.0)).unwrap();
    let mut mean = [0.0; 2];
    for col in 1..3 {
        for k in 0..2 {
            mean[k] += at(&p.fz, 1, col, k) / 2.0;
        }
    }
    let mut tape = Tape::new();
    let v = p.record(&mut tape, false);
    let r = pointwise_add(&mut tape, &v).unwrap();
    for (i, &x) in p.fx.data().iter().enumerate() {
        assert!((tape.value(r).data()[i] - (x + mean[i % 2])).abs() < 1e-14);
    }
}

#[test]
fn film_with_unit_gamma_and_zero_beta_is_identity() {
    let p = pair(3, 3, 4, 4, 5, 11);
    let mut tape = Tape::new();
    let v = p.record(&mut tape, false);
    let zeros = tape.constant(Tensor::zeros(&[5, 5]).unwrap());
    let ones = tape.constant(Tensor::full(&[5], 1.0).unwrap());
    let zb = tape.constant(Tensor::zeros(&[5]).unwrap());
    let r = film(&mut tape, &v, (zeros, ones), (zeros, zb)).unwrap();
    assert_eq!(tape.value(r).data(), p.fx.data());
}

#[test]
fn guidance_with_empty_mask_is_identity() {
    let p = pair(3, 3, 4, 4, 4, 12);
    for (normalize, mean) in [(true, true), (false, false)] {
        let mut tape = Tape::new();
        let mut v = p.record(&mut tape, false);
        v.mask_z = tape.constant(Tensor::zeros(&[3, 3, 1]).unwrap());
        let r = transductive_guidance(&mut tape, &v, normalize, mean).unwrap();
        assert_eq!(tape.value(r).data(), p.fx.data());
    }
}

fn affinity_oracle(p: &FeaturePair<f64>) -> Vec<f64> {
    let c = p.fx.shape()[2];
    let nx = p.fx.len() / c;
    let nz = p.fz.len() / c;
    let mut a = vec![0.0; nx * nz];
    for i in 0..nx {
        for j in 0..nz {
            a[i * nz + j] = (0..c).map(|k| p.fx.data()[i * c + k] * p.fz.data()[j * c + k]).sum();
        }
    }
    a
}

#[test]
fn affinity_is_shared_and_matches_dot_products() {
    let p = pair(2, 3, 4, 3, 4, 13);
    let want = affinity_oracle(&p);
    let mut tape = Tape::new();
    let v = p.record(&mut tape, false);
    let raw = affinity(&mut tape, &v, false).unwrap();
    let scaled = affinity(&mut tape, &v, true).unwrap();
    for (i, w) in want.iter().enumerate() {
        assert!((tape.value(raw).data()[i] - w).abs() < 1e-13);
        assert!((tape.value(scaled).data()[i] - w / 2.0).abs() < 1e-13);
    }

    // Guidance built from the same affinity: G = A·m, summed over mask cells.
    let nz = 6;
    let mask: Vec<f64> = p.mask_z.data().to_vec();
    let r = transductive_guidance(&mut tape, &v, false, false).unwrap();
    for cell in 0..12 {
        let g: f64 = (0..nz).map(|j| want[cell * nz + j] * mask[j]).sum();
        for k in 0..4 {
            let got = tape.value(r).data()[cell * 4 + k];
            assert!((got - (p.fx.data()[cell * 4 + k] + g)).abs() < 1e-12);
        }
    }
}

#[test]
fn pairwise_relation_projects_affinity_columns() {
    let p = pair(2, 2, 3, 3, 4, 14);
    let w = rand(&[4, 4], 15);
    let b = rand(&[4], 16);
    let a = affinity_oracle(&p);
    let mut tape = Tape::new();
    let v = p.record(&mut tape, false);
    let (wv, bv) = (tape.constant(w.clone()), tape.constant(b.clone()));
    let r = pairwise_relation(&mut tape, &v, wv, bv, false).unwrap();
    for cell in 0..9 {
        for o in 0..4 {
            let want: f64 = b.data()[o] + (0..4).map(|j| a[cell * 4 + j] * w.data()[j * 4 + o]).sum::<f64>();
            assert!((tape.value(r).data()[cell * 4 + o] - want).abs() < 1e-12);
        }
    }
}

fn conv(x: &[f64], w: &Tensor<f64>, b: &Tensor<f64>) -> Vec<f64> {
    let (cin, cout) = (w.shape()[0], w.shape()[1]);
    x.chunks(cin)
        .flat_map(|cell| {
            (0..cout).map(move |o| b.data()[o] + (0..cin).map(|i| cell[i] * w.data()[i * cout + o]).sum::<f64>())
        })
        .collect()
}

fn attention_oracle(p: &FeaturePair<f64>, params: &[(Tensor<f64>, Tensor<f64>)], heads: usize) -> Vec<f64> {
    let c = p.fx.shape()[2];
    let q = conv(p.fx.data(), &params[0].0, &params[0].1);
    let k = conv(p.fz.data(), &params[1].0, &params[1].1);
    let v = conv(p.fz.data(), &params[2].0, &params[2].1);
    let (nx, nz, hd) = (q.len() / c, k.len() / c, c / heads);
    let mut out = vec![0.0; nx * c];
    for h in 0..heads {
        for i in 0..nx {
            let scores: Vec<f64> = (0..nz)
                .map(|j| (0..hd).map(|t| q[i * c + h * hd + t] * k[j * c + h * hd + t]).sum::<f64>() / (hd as f64).sqrt())
                .collect();
            let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
            let z: f64 = e.iter().sum();
            for t in 0..hd {
                out[i * c + h * hd + t] = (0..nz).map(|j| e[j] / z * v[j * c + h * hd + t]).sum();
            }
        }
    }
    out
}

#[test]
fn transformer_matches_naive_attention() {
    let p = pair(2, 3, 3, 3, 4, 20);
    let params: Vec<(Tensor<f64>, Tensor<f64>)> =
        (0..3).map(|i| (rand(&[4, 4], 21 + i), rand(&[4], 31 + i))).collect();
    for heads in [1, 2, 4] {
        let want = attention_oracle(&p, &params, heads);
        let mut tape = Tape::new();
        let v: PairVars = p.record(&mut tape, false);
        let vars: Vec<_> = params
            .iter()
            .map(|(w, b)| (tape.constant(w.clone()), tape.constant(b.clone())))
            .collect();
        let r = simple_transformer(&mut tape, &v, [vars[0], vars[1], vars[2]], heads).unwrap();
        for (got, w) in tape.value(r).data().iter().zip(&want) {
            assert!((got - w).abs() < 1e-12, "heads {heads}");
        }
    }
}

#[test]
fn relation_and_guidance_share_one_affinity() {
    let p = pair(2, 2, 3, 4, 4, 50);
    let mut tape = Tape::new();
    let v = p.record(&mut tape, false);
    let a = affinity(&mut tape, &v, true).unwrap();
    let eye = tape.constant(Tensor::from_vec(&[4, 4], (0..16).map(|i| f64::from(i % 5 == 0)).collect()).unwrap());
    let zb = tape.constant(Tensor::zeros(&[4]).unwrap());
    let pr = pairwise_relation(&mut tape, &v, eye, zb, true).unwrap();
    assert_eq!(tape.value(pr).data(), tape.value(a).data());
    for j in 0..4 {
        let mut vj = v;
        let mut m = vec![0.0; 4];
        m[j] = 1.0;
        vj.mask_z = tape.constant(Tensor::from_vec(&[2, 2, 1], m).unwrap());
        let g = guidance_map(&mut tape, &vj, true, false).unwrap();
        let col: Vec<f64> = tape.value(a).data().chunks(4).map(|row| row[j]).collect();
        assert_eq!(tape.value(g).data(), col.as_slice());
    }
}
