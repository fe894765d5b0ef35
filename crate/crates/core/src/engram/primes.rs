fn mul_mod(a: u64, b: u64, m: u64) -> u64 {
    ((a as u128 * b as u128) % m as u128) as u64
}

fn pow_mod(mut base: u64, mut exp: u64, m: u64) -> u64 {
    let mut acc = 1 % m;
    base %= m;
    while exp > 0 {
        if exp & 1 == 1 {
            acc = mul_mod(acc, base, m);
        }
        base = mul_mod(base, base, m);
        exp >>= 1;
    }
    acc
}

/// Deterministic Miller-Rabin, exact for every `u64`.
pub fn is_prime(n: u64) -> bool {
    const WITNESSES: [u64; 12] = [2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37];
    if n < 2 {
        return false;
    }
    for &p in &WITNESSES {
        if n % p == 0 {
            return n == p;
        }
    }
    let mut d = n - 1;
    let mut s = 0;
    while d % 2 == 0 {
        d /= 2;
        s += 1;
    }
    'outer: for &a in &WITNESSES {
        let mut x = pow_mod(a, d, n);
        if x == 1 || x == n - 1 {
            continue;
        }
        for _ in 1..s {
            x = mul_mod(x, x, n);
            if x == n - 1 {
                continue 'outer;
            }
        }
        return false;
    }
    true
}

/// The `k` distinct primes closest to `target`, scanning outward (larger
/// candidate first at equal distance). Candidates above `cap` are taken
/// only if fewer than `k` primes exist at or below it.
pub fn nearest_primes(target: u64, k: usize, cap: u64) -> Vec<u64> {
    let mut out = Vec::with_capacity(k);
    let mut dist = 0u64;
    let mut below_exhausted = false;
    let mut above_capped = false;
    while out.len() < k {
        let up = target.checked_add(dist);
        if let Some(up) = up {
            if up <= cap && is_prime(up) {
                out.push(up);
            } else if up > cap {
                above_capped = true;
            }
        }
        if dist > 0 && out.len() < k {
            match target.checked_sub(dist) {
                Some(down) if down >= 2 => {
                    if down <= cap && is_prime(down) {
                        out.push(down);
                    }
                }
                _ => below_exhausted = true,
            }
        }
        if below_exhausted && above_capped {
            break;
        }
        dist += 1;
    }
    let mut next = cap.max(target);
    while out.len() < k {
        next += 1;
        if is_prime(next) && !out.contains(&next) {
            out.push(next);
        }
    }
    out
}
