//! Partial-wave channel bases and angular coupling of the induced dipole term.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Parity {
    Even,
    Odd,
}

impl Parity {
    pub fn of(l: u32) -> Parity {
        if l % 2 == 0 { Parity::Even } else { Parity::Odd }
    }

    pub fn lowest_l(self) -> u32 {
        match self {
            Parity::Even => 0,
            Parity::Odd => 1,
        }
    }
}

impl std::str::FromStr for Parity {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "even" => Ok(Parity::Even),
            "odd" => Ok(Parity::Odd),
            other => Err(Error::domain(format!("unknown parity '{other}'"))),
        }
    }
}

impl std::fmt::Display for Parity {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Parity::Even => "even",
            Parity::Odd => "odd",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Channel {
    pub l: u32,
    pub m: i32,
}

impl Channel {
    pub fn new(l: u32, m: i32) -> Result<Self> {
        if m.unsigned_abs() > l {
            return Err(Error::domain(format!("|m| = {} exceeds l = {l}", m.abs())));
        }
        Ok(Channel { l, m })
    }
}

/// Ordered channel list. Bases built by [`build_basis`] hold one m-block of
/// one parity; [`ChannelBasis::from_blocks`] concatenates blocks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelBasis {
    pub parity: Option<Parity>,
    pub l_max: u32,
    pub channels: Vec<Channel>,
}

impl ChannelBasis {
    pub fn len(&self) -> usize {
        self.channels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.channels.is_empty()
    }

    pub fn from_blocks(blocks: &[ChannelBasis]) -> ChannelBasis {
        let channels: Vec<Channel> = blocks.iter().flat_map(|b| b.channels.iter().copied()).collect();
        let parity = blocks.first().and_then(|b| b.parity);
        let same = blocks.iter().all(|b| b.parity == parity);
        ChannelBasis {
            parity: if same { parity } else { None },
            l_max: blocks.iter().map(|b| b.l_max).max().unwrap_or(0),
            channels,
        }
    }

    /// Channel-index ranges of consecutive runs sharing (parity, m).
    pub fn blocks(&self) -> Vec<std::ops::Range<usize>> {
        let mut out = Vec::new();
        let mut start = 0;
        for i in 1..=self.channels.len() {
            let split = i == self.channels.len() || {
                let a = self.channels[i - 1];
                let b = self.channels[i];
                a.m != b.m || (a.l + b.l) % 2 == 1
            };
            if split {
                out.push(start..i);
                start = i;
            }
        }
        out
    }

    pub fn index_of(&self, l: u32, m: i32) -> Option<usize> {
        self.channels.iter().position(|c| c.l == l && c.m == m)
    }
}

pub fn build_basis(parity: Parity, m: i32, l_max: u32) -> Result<ChannelBasis> {
    let am = m.unsigned_abs();
    if l_max < am {
        return Err(Error::EmptyBasis { l_max, m });
    }
    let channels: Vec<Channel> = (am..=l_max)
        .filter(|&l| Parity::of(l) == parity)
        .map(|l| Channel { l, m })
        .collect();
    if channels.is_empty() {
        return Err(Error::EmptyBasis { l_max, m });
    }
    Ok(ChannelBasis { parity: Some(parity), l_max, channels })
}

/// <l m | P2(cos theta) | l' m'>.
pub fn p2_matrix_element(l: u32, m: i32, lp: u32, mp: i32) -> f64 {
    if m != mp || (l + lp) % 2 == 1 || l.abs_diff(lp) > 2 {
        return 0.0;
    }
    if m.unsigned_abs() > l || m.unsigned_abs() > lp {
        return 0.0;
    }
    let m2 = (m as f64) * (m as f64);
    if l == lp {
        let lf = l as f64;
        return (lf * (lf + 1.0) - 3.0 * m2) / ((2.0 * lf - 1.0) * (2.0 * lf + 3.0));
    }
    let lo = l.min(lp) as f64;
    let num = ((lo + 1.0).powi(2) - m2) * ((lo + 2.0).powi(2) - m2);
    let den = (2.0 * lo + 1.0) * (2.0 * lo + 5.0);
    1.5 / (2.0 * lo + 3.0) * (num / den).sqrt()
}

/// Real phase replacing i^{l'-l} on couplings within one parity block.
pub fn coupling_phase(l: u32, lp: u32) -> f64 {
    let d = lp as i64 - l as i64;
    debug_assert!(d % 2 == 0);
    if (d / 2).rem_euclid(2) == 0 { 1.0 } else { -1.0 }
}

fn binomial(n: u32, k: u32) -> f64 {
    if k > n {
        return 0.0;
    }
    let k = k.min(n - k);
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

/// K_{lL}^m = sqrt(C(l+L, l+m) C(l+L, L+m)).
pub fn multipole_coefficient(l: u32, big_l: u32, m: i32) -> Result<f64> {
    if l == 0 || big_l == 0 {
        return Err(Error::domain("multipole orders must be >= 1"));
    }
    if m.unsigned_abs() > l.min(big_l) {
        return Err(Error::domain(format!("|m| = {} exceeds min(l, L)", m.abs())));
    }
    let n = l + big_l;
    let a = (l as i64 + m as i64) as u32;
    let b = (big_l as i64 + m as i64) as u32;
    Ok((binomial(n, a) * binomial(n, b)).sqrt())
}
