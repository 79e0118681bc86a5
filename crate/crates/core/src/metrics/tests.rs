use super::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_mask(h: usize, w: usize, density: f64, r: &mut impl Rng) -> BinaryMask {
    let data = (0..h * w).map(|_| r.gen_bool(density) as u8).collect();
    BinaryMask::new(h, w, data).unwrap()
}

fn parse(rows: &[&str]) -> BinaryMask {
    let h = rows.len();
    let w = rows[0].len();
    BinaryMask::from_fn(h, w, |y, x| rows[y].as_bytes()[x] == b'#')
}

fn annulus(n: usize, r_in: f64, r_out: f64) -> BinaryMask {
    let c = (n as f64 - 1.0) / 2.0;
    BinaryMask::from_fn(n, n, |y, x| {
        let d = ((y as f64 - c).powi(2) + (x as f64 - c).powi(2)).sqrt();
        d >= r_in && d <= r_out
    })
}

fn disk(n: usize, cy: f64, cx: f64, r: f64) -> BinaryMask {
    BinaryMask::from_fn(n, n, |y, x| {
        (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2) <= r * r
    })
}

/// Depth-first component count on a grid given a membership predicate.
fn dfs_components(
    h: usize,
    w: usize,
    member: &dyn Fn(usize, usize) -> bool,
    diagonal: bool,
) -> (usize, Vec<usize>) {
    let mut comp = vec![usize::MAX; h * w];
    let mut count = 0;
    for sy in 0..h {
        for sx in 0..w {
            if !member(sy, sx) || comp[sy * w + sx] != usize::MAX {
                continue;
            }
            let mut stack = vec![(sy, sx)];
            comp[sy * w + sx] = count;
            while let Some((y, x)) = stack.pop() {
                for dy in -1i64..=1 {
                    for dx in -1i64..=1 {
                        if (dy == 0 && dx == 0) || (!diagonal && dy != 0 && dx != 0) {
                            continue;
                        }
                        let (ny, nx) = (y as i64 + dy, x as i64 + dx);
                        if ny < 0 || nx < 0 || ny >= h as i64 || nx >= w as i64 {
                            continue;
                        }
                        let (ny, nx) = (ny as usize, nx as usize);
                        if member(ny, nx) && comp[ny * w + nx] == usize::MAX {
                            comp[ny * w + nx] = count;
                            stack.push((ny, nx));
                        }
                    }
                }
            }
            count += 1;
        }
    }
    (count, comp)
}

/// β0 from 4-connected DFS; β1 from 8-connected DFS of the background on
/// a grid padded by one ring of background, minus the outer region.
fn oracle_betti(m: &BinaryMask) -> (usize, usize) {
    let (h, w) = (m.height(), m.width());
    let (b0, _) = dfs_components(h, w, &|y, x| m.get(y, x), false);
    let padded_bg = |y: usize, x: usize| {
        y == 0 || x == 0 || y == h + 1 || x == w + 1 || !m.get(y - 1, x - 1)
    };
    let (bg, _) = dfs_components(h + 2, w + 2, &padded_bg, true);
    (b0, bg - 1)
}

fn oracle_labels(m: &BinaryMask) -> Vec<u32> {
    let (h, w) = (m.height(), m.width());
    let (_, comp) = dfs_components(h, w, &|y, x| m.get(y, x), false);
    comp.iter()
        .map(|c| if *c == usize::MAX { 0 } else { *c as u32 + 1 })
        .collect()
}

fn has_2x2_block(m: &BinaryMask) -> bool {
    (0..m.height().saturating_sub(1)).any(|y| {
        (0..m.width().saturating_sub(1))
            .any(|x| m.get(y, x) && m.get(y, x + 1) && m.get(y + 1, x) && m.get(y + 1, x + 1))
    })
}

#[test]
fn mask_validation() {
    assert!(BinaryMask::new(2, 2, vec![0, 1, 2, 0]).is_err());
    assert!(BinaryMask::new(2, 2, vec![0, 1, 0]).is_err());
    let t = Tensor::new(&[1, 2, 2], vec![0.2, 0.5, 0.7, 0.49]).unwrap();
    assert_eq!(BinaryMask::threshold(&t, 0.5).unwrap().data(), &[0, 1, 1, 0]);
    assert!(BinaryMask::threshold(&Tensor::zeros(&[2, 2, 2]), 0.5).is_err());
}

#[test]
fn canonical_topology_fixtures() {
    let ring = annulus(16, 4.0, 6.5);
    assert_eq!(betti_numbers(&ring), (1, 1));
    assert_eq!(euler_characteristic(&ring), 0);

    let mut two = disk(16, 4.0, 4.0, 2.5);
    let other = disk(16, 11.0, 11.0, 2.5);
    for y in 0..16 {
        for x in 0..16 {
            if other.get(y, x) {
                two.set(y, x, true);
            }
        }
    }
    assert_eq!(betti_numbers(&two), (2, 0));
    assert_eq!(euler_characteristic(&two), 2);

    let single = parse(&["...", ".#.", "..."]);
    assert_eq!(euler_characteristic(&single), 1);
    let block = parse(&["##", "##"]);
    assert_eq!(euler_characteristic(&block), 1);
    assert_eq!(betti_numbers(&BinaryMask::zeros(5, 5)), (0, 0));
    assert_eq!(euler_characteristic(&BinaryMask::zeros(5, 5)), 0);

    // A hole touching the border is part of the outer region.
    let open = parse(&["#.#", "#.#", "###"]);
    assert_eq!(betti_numbers(&open), (1, 0));
}

#[test]
fn diagonal_ring_fixture() {
    // Pixels meeting only at corners are separate components, and the
    // enclosed centre leaks out diagonally, so there is no hole.
    let diamond = parse(&[".#.", "#.#", ".#."]);
    assert_eq!(betti_numbers(&diamond), (4, 0));
    assert_eq!(euler_characteristic(&diamond), 4);

    let checker = parse(&["#.#.", ".#.#", "#.#.", ".#.#"]);
    assert_eq!(betti_numbers(&checker), (8, 0));
    assert_eq!(euler_characteristic(&checker), 8);
}

#[test]
fn betti_and_euler_match_oracles_on_random_masks() {
    let mut r = rng(1);
    for i in 0..500 {
        let m = random_mask(8, 8, 0.2 + 0.6 * (i as f64 / 500.0), &mut r);
        let (b0, b1) = betti_numbers(&m);
        assert_eq!((b0, b1), oracle_betti(&m), "mask {i}");
        assert_eq!(euler_characteristic(&m), b0 as i64 - b1 as i64, "mask {i}");
    }
}

#[test]
fn labeling_matches_oracle() {
    let mut r = rng(2);
    for _ in 0..100 {
        let m = random_mask(7, 9, 0.5, &mut r);
        let l = label_components(&m);
        assert_eq!(l.labels, oracle_labels(&m));
        assert_eq!(l.count, *l.labels.iter().max().unwrap() as usize);
    }
}

#[test]
fn skeleton_of_thin_lines_is_unchanged() {
    let line = parse(&["......", ".####.", "......"]);
    assert_eq!(skeletonize(&line), line);
    let stair = parse(&["##...", ".##..", "..##.", "...##"]);
    assert_eq!(skeletonize(&stair), stair);
    let ring = parse(&[".###.", ".#.#.", ".###."]);
    assert_eq!(skeletonize(&ring), ring);
    assert_eq!(skeletonize(&BinaryMask::zeros(4, 4)), BinaryMask::zeros(4, 4));
}

#[test]
fn skeleton_of_thick_bar_is_one_pixel_wide() {
    let bar = BinaryMask::from_fn(7, 14, |y, x| (2..5).contains(&y) && (2..12).contains(&x));
    let s = skeletonize(&bar);
    assert!(s.is_subset_of(&bar));
    assert!(!has_2x2_block(&s));
    assert_eq!(betti_numbers(&s), (1, 0));
    // Every skeleton pixel has at most two 4-neighbours: a simple path.
    for y in 0..7 {
        for x in 0..14 {
            if s.get(y, x) {
                let n = N4
                    .iter()
                    .filter(|(dy, dx)| s.at(y as isize + dy, x as isize + dx))
                    .count();
                assert!(n <= 2, "branch at ({y},{x})");
            }
        }
    }
    assert!(s.count() >= 8, "{}", s.count());
}

#[test]
fn skeleton_of_annulus_keeps_the_loop() {
    let ring = annulus(20, 4.0, 7.5);
    let s = skeletonize(&ring);
    assert_eq!(betti_numbers(&s), (1, 1));
    assert!(s.count() < ring.count() / 2);
}

proptest! {
    #[test]
    fn skeleton_preserves_topology(seed in any::<u64>(), density in 0.3f64..0.9) {
        let m = random_mask(10, 10, density, &mut rng(seed));
        let s = skeletonize(&m);
        prop_assert!(s.is_subset_of(&m));
        prop_assert_eq!(betti_numbers(&s), betti_numbers(&m));
        prop_assert_eq!(skeletonize(&s), s.clone());
    }

    #[test]
    fn symmetric_metrics(seed in any::<u64>()) {
        let mut r = rng(seed);
        let a = random_mask(6, 6, 0.5, &mut r);
        let b = random_mask(6, 6, 0.5, &mut r);
        prop_assert_eq!(dice(&a, &b).unwrap(), dice(&b, &a).unwrap());
        let (x, y) = (variation_of_information(&a, &b).unwrap(), variation_of_information(&b, &a).unwrap());
        prop_assert!((x - y).abs() < 1e-12);
        let (x, y) = (ari_error(&a, &b).unwrap(), ari_error(&b, &a).unwrap());
        prop_assert!((x - y).abs() < 1e-12);
    }
}

#[test]
fn cl_dice_limits_and_gap_monotonicity() {
    let bar = BinaryMask::from_fn(7, 20, |y, x| (2..5).contains(&y) && (1..19).contains(&x));
    assert_eq!(cl_dice(&bar, &bar).unwrap(), 1.0);
    let left = BinaryMask::from_fn(7, 20, |y, x| (1..3).contains(&y) && x < 8);
    let right = BinaryMask::from_fn(7, 20, |y, x| (4..6).contains(&y) && x > 10);
    assert_eq!(cl_dice(&left, &right).unwrap(), 0.0);
    let empty = BinaryMask::zeros(7, 20);
    assert_eq!(cl_dice(&empty, &empty).unwrap(), 1.0);
    assert_eq!(cl_dice(&empty, &bar).unwrap(), 0.0);

    let mut last = 1.0;
    for gap in 1..=6 {
        let lo = 10 - gap / 2;
        let cut = BinaryMask::from_fn(7, 20, |y, x| bar.get(y, x) && !(lo..lo + gap).contains(&x));
        let v = cl_dice(&cut, &bar).unwrap();
        assert!(v > 0.0 && v < 1.0, "gap {gap}: {v}");
        assert!(v < last, "gap {gap}: {v} !< {last}");
        last = v;
    }
    assert!(cl_dice(&bar, &BinaryMask::zeros(6, 20)).is_err());
}

/// Rand-index pieces by explicit enumeration of pixel pairs.
fn oracle_ari(a: &[u32], b: &[u32]) -> f64 {
    let n = a.len();
    let (mut both, mut only_a, mut only_b, mut total) = (0.0, 0.0, 0.0, 0.0);
    for i in 0..n {
        for j in i + 1..n {
            let sa = a[i] == a[j];
            let sb = b[i] == b[j];
            both += (sa && sb) as u8 as f64;
            only_a += sa as u8 as f64;
            only_b += sb as u8 as f64;
            total += 1.0;
        }
    }
    if total == 0.0 {
        return 1.0;
    }
    let expected = only_a * only_b / total;
    let max = (only_a + only_b) / 2.0;
    if max == expected {
        return 1.0;
    }
    (both - expected) / (max - expected)
}

fn oracle_vi(a: &[u32], b: &[u32]) -> f64 {
    let n = a.len() as f64;
    let mut joint: HashMap<(u32, u32), f64> = HashMap::new();
    let mut pa: HashMap<u32, f64> = HashMap::new();
    let mut pb: HashMap<u32, f64> = HashMap::new();
    for (x, y) in a.iter().zip(b) {
        *joint.entry((*x, *y)).or_default() += 1.0 / n;
        *pa.entry(*x).or_default() += 1.0 / n;
        *pb.entry(*y).or_default() += 1.0 / n;
    }
    let h = |m: &HashMap<u32, f64>| -m.values().map(|p| p * p.ln()).sum::<f64>();
    let hj = -joint.values().map(|p| p * p.ln()).sum::<f64>();
    // VI = 2 H(A,B) − H(A) − H(B)
    2.0 * hj - h(&pa) - h(&pb)
}

#[test]
fn ari_and_vi_match_oracles() {
    let mut r = rng(3);
    for i in 0..200 {
        let (h, w) = (r.gen_range(1..=4), r.gen_range(1..=4));
        let a = random_mask(h, w, 0.5, &mut r);
        let b = random_mask(h, w, 0.5, &mut r);
        let (la, lb) = (oracle_labels(&a), oracle_labels(&b));
        let want = 1.0 - oracle_ari(&la, &lb);
        assert!((ari_error(&a, &b).unwrap() - want).abs() < 1e-12, "pair {i}");
        let want = oracle_vi(&la, &lb);
        assert!((variation_of_information(&a, &b).unwrap() - want).abs() < 1e-12, "pair {i}");
    }
}

#[test]
fn vi_on_random_partitions() {
    let mut r = rng(4);
    for _ in 0..50 {
        let a: Vec<u32> = (0..16).map(|_| r.gen_range(0..4)).collect();
        let b: Vec<u32> = (0..16).map(|_| r.gen_range(0..3)).collect();
        let got = variation_of_information_labels(&a, &b).unwrap();
        assert!((got - oracle_vi(&a, &b)).abs() < 1e-12);
        assert!((adjusted_rand_index(&a, &b).unwrap() - oracle_ari(&a, &b)).abs() < 1e-12);
    }
}

#[test]
fn ari_fixtures() {
    let m = parse(&["#..#", "#..#", "....", "##.."]);
    assert_eq!(ari_error(&m, &m).unwrap(), 0.0);
    assert_eq!(variation_of_information(&m, &m).unwrap(), 0.0);

    let half = BinaryMask::from_fn(4, 4, |y, _| y < 2);
    let none = BinaryMask::zeros(4, 4);
    let want = 1.0 - oracle_ari(&oracle_labels(&none), &oracle_labels(&half));
    assert!((ari_error(&none, &half).unwrap() - want).abs() < 1e-12);
    // One cluster against a balanced split carries no agreement beyond chance.
    assert!((want - 1.0).abs() < 1e-12);

    // Both trivial: ARI is taken as 1.
    assert_eq!(ari_error(&none, &none).unwrap(), 0.0);

    let a = [1, 1, 2, 2, 3, 0];
    let b = [7, 7, 9, 9, 4, 5];
    assert!((adjusted_rand_index(&a, &b).unwrap() - 1.0).abs() < 1e-12);
    let c = [1, 2, 2, 3, 3, 0];
    let permuted = [3, 0, 0, 1, 1, 2];
    assert_eq!(
        adjusted_rand_index(&a, &c).unwrap(),
        adjusted_rand_index(&a, &permuted).unwrap()
    );
    assert!(adjusted_rand_index(&a, &c[..5]).is_err());
}

#[test]
fn dice_values() {
    let a = parse(&["##..", "....", "....", "...."]);
    let b = parse(&["#...", "#...", "....", "...."]);
    assert_eq!(dice(&a, &a).unwrap(), 1.0);
    assert_eq!(dice(&a, &b).unwrap(), 0.5);
    assert_eq!(dice(&BinaryMask::zeros(2, 2), &BinaryMask::zeros(2, 2)).unwrap(), 1.0);
}

fn oracle_auc(prob: &[f64], gt: &[u8]) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for (i, p) in prob.iter().enumerate() {
        if gt[i] != 1 {
            continue;
        }
        for (j, q) in prob.iter().enumerate() {
            if gt[j] != 0 {
                continue;
            }
            den += 1.0;
            num += if p > q {
                1.0
            } else if p == q {
                0.5
            } else {
                0.0
            };
        }
    }
    num / den
}

#[test]
fn auc_matches_pairwise_oracle() {
    let mut r = rng(5);
    for i in 0..50 {
        let gt = loop {
            let m = random_mask(8, 8, 0.4, &mut r);
            if m.count() > 0 && m.count() < 64 {
                break m;
            }
        };
        // Coarse quantization to exercise ties.
        let prob = Tensor::from_fn(&[8, 8], |_| (r.gen_range(0.0..1.0f64) * 6.0).round() / 6.0);
        let want = oracle_auc(prob.data(), gt.data());
        assert!((auc(&prob, &gt).unwrap() - want).abs() < 1e-12, "instance {i}");
    }
}

#[test]
fn auc_edge_cases() {
    let gt = parse(&["##", ".."]);
    let separated = Tensor::new(&[2, 2], vec![0.9, 0.8, 0.1, 0.2]).unwrap();
    assert_eq!(auc(&separated, &gt).unwrap(), 1.0);
    let flat = Tensor::full(&[2, 2], 0.5);
    assert_eq!(auc(&flat, &gt).unwrap(), 0.5);
    assert!(auc(&flat, &BinaryMask::zeros(2, 2)).is_err());
    assert!(auc(&flat, &parse(&["##", "##"])).is_err());
    assert!(auc(&Tensor::full(&[3, 2], 0.5), &gt).is_err());
}

#[test]
fn evaluate_pair_fixtures() {
    let ring = annulus(16, 4.0, 6.5);
    let prob = ring.to_tensor();
    let r = evaluate_pair(&prob, &ring, DEFAULT_THRESHOLD).unwrap();
    assert_eq!(r.dice, 1.0);
    assert_eq!(r.cl_dice, 1.0);
    assert_eq!(r.auc, 1.0);
    assert_eq!(
        (r.betti0_error, r.betti1_error, r.euler_error, r.ari_error, r.vi),
        (0.0, 0.0, 0.0, 0.0, 0.0)
    );

    let mut speck = ring.clone();
    speck.set(0, 0, true);
    let r = evaluate_pair(&speck.to_tensor(), &ring, 0.5).unwrap();
    assert_eq!(r.betti0_error, 1.0);

    let filled = disk(16, 7.5, 7.5, 6.5);
    let r = evaluate_pair(&filled.to_tensor(), &ring, 0.5).unwrap();
    assert_eq!(r.betti1_error, 1.0);
    assert_eq!(r.euler_error, 1.0);
    assert_eq!(r.counts.gt_betti1, 1.0);
}

#[test]
fn report_json_keys_and_mean() {
    let ring = annulus(12, 3.0, 5.0);
    let r = evaluate_pair(&ring.to_tensor(), &ring, 0.5).unwrap();
    let v = serde_json::to_value(r).unwrap();
    for key in [
        "dice",
        "auc",
        "cl_dice",
        "betti0_error",
        "betti1_error",
        "euler_error",
        "ari_error",
        "vi",
    ] {
        assert!(v[key].is_number(), "{key}");
    }
    let mut other = r;
    other.dice = 0.0;
    other.betti0_error = 3.0;
    let m = MetricsReport::mean(&[r, other]).unwrap();
    assert_eq!(m.dice, 0.5);
    assert_eq!(m.betti0_error, 1.5);
    assert!(MetricsReport::mean(&[]).is_none());
}
