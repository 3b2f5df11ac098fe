//! Counter-based dropout masks: every mask bit is a pure function of
//! (seed, step, site, element), so runs replay exactly.

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Eval,
    Train { seed: u64, step: u64 },
}

impl Mode {
    pub fn train(seed: u64, step: u64) -> Self {
        Mode::Train { seed, step }
    }

    /// Derives an independent key for a sub-invocation (e.g. the k-th text
    /// encoded within one sample).
    pub fn fork(self, k: u64) -> Self {
        match self {
            Mode::Eval => Mode::Eval,
            Mode::Train { seed, step } => Mode::Train { seed, step: mix(step ^ mix(k.wrapping_add(0x9e37))) },
        }
    }

    pub fn is_train(&self) -> bool {
        matches!(self, Mode::Train { .. })
    }
}

#[inline]
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Uniform in [0,1) keyed by the four coordinates.
pub fn keyed_uniform(seed: u64, step: u64, site: u64, idx: u64) -> f64 {
    let h = mix(mix(mix(seed) ^ step) ^ site.rotate_left(17) ^ mix(idx));
    (h >> 11) as f64 / (1u64 << 53) as f64
}

/// Returns per-element scale factors (0 or 1/(1-p)), or `None` when dropout
/// is inactive.
pub fn mask(mode: Mode, p: f64, site: u64, len: usize) -> Option<Vec<f64>> {
    match mode {
        Mode::Train { seed, step } if p > 0.0 => {
            let keep = 1.0 / (1.0 - p);
            Some(
                (0..len)
                    .map(|i| {
                        if keyed_uniform(seed, step, site, i as u64) < p {
                            0.0
                        } else {
                            keep
                        }
                    })
                    .collect(),
            )
        }
        _ => None,
    }
}

pub fn apply(data: &mut [f64], mask: &Option<Vec<f64>>) {
    if let Some(m) = mask {
        for (x, s) in data.iter_mut().zip(m) {
            *x *= s;
        }
    }
}
