//! Proximal operators for the elementwise ℓ1 and cross-level fusion terms.

pub fn soft_threshold(x: f64, t: f64) -> f64 {
    if x > t {
        x - t
    } else if x < -t {
        x + t
    } else {
        0.0
    }
}

/// Exact solution of `min_x ½‖x − y‖² + λ Σ_k |x_{k+1} − x_k|` using
/// Condat's direct taut-string style algorithm (linear time in practice).
pub fn tv_denoise(y: &[f64], lambda: f64) -> Vec<f64> {
    let width = y.len();
    let mut out = vec![0.0; width];
    if width == 0 {
        return out;
    }
    if lambda <= 0.0 {
        out.copy_from_slice(y);
        return out;
    }
    let minlambda = -lambda;
    let twolambda = 2.0 * lambda;
    let (mut k, mut k0, mut kplus, mut kminus) = (0usize, 0usize, 0usize, 0usize);
    let (mut umin, mut umax) = (lambda, minlambda);
    let (mut vmin, mut vmax) = (y[0] - lambda, y[0] + lambda);
    loop {
        while k == width - 1 {
            if umin < 0.0 {
                loop {
                    out[k0] = vmin;
                    k0 += 1;
                    if k0 > kminus {
                        break;
                    }
                }
                k = k0;
                kminus = k0;
                vmin = y[k0];
                umin = lambda;
                umax = vmin + umin - vmax;
            } else if umax > 0.0 {
                loop {
                    out[k0] = vmax;
                    k0 += 1;
                    if k0 > kplus {
                        break;
                    }
                }
                k = k0;
                kplus = k0;
                vmax = y[k0];
                umax = minlambda;
                umin = vmax + umax - vmin;
            } else {
                vmin += umin / (k - k0 + 1) as f64;
                loop {
                    out[k0] = vmin;
                    k0 += 1;
                    if k0 > k {
                        break;
                    }
                }
                return out;
            }
        }
        umin += y[k + 1] - vmin;
        if umin < minlambda {
            loop {
                out[k0] = vmin;
                k0 += 1;
                if k0 > kminus {
                    break;
                }
            }
            k = k0;
            kminus = k0;
            kplus = k0;
            vmin = y[k0];
            vmax = vmin + twolambda;
            umin = lambda;
            umax = minlambda;
            continue;
        }
        umax += y[k + 1] - vmax;
        if umax > lambda {
            loop {
                out[k0] = vmax;
                k0 += 1;
                if k0 > kplus {
                    break;
                }
            }
            k = k0;
            kminus = k0;
            kplus = k0;
            vmax = y[k0];
            vmin = vmax - twolambda;
            umin = lambda;
            umax = minlambda;
            continue;
        }
        k += 1;
        if umin >= lambda {
            kminus = k;
            vmin += (umin - lambda) / (kminus - k0 + 1) as f64;
            umin = lambda;
        }
        if umax <= minlambda {
            kplus = k;
            vmax += (umax + lambda) / (kplus - k0 + 1) as f64;
            umax = minlambda;
        }
    }
}

/// Fused-lasso signal approximator:
/// `argmin_x ½‖x − y‖² + λ Σ|x_k| + ρ Σ|x_{k+1} − x_k|`.
pub fn fused_lasso(y: &[f64], lambda: f64, rho: f64) -> Vec<f64> {
    tv_denoise(y, rho)
        .into_iter()
        .map(|v| soft_threshold(v, lambda))
        .collect()
}
