//! Plane priority orders for the channel/way/die/plane allocation schemes.

use std::fmt;
use std::str::FromStr;

use crate::flash::{FlashGeometry, PlaneAddr};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Scheme {
    /// Channel varies fastest, then way, die, plane.
    Cwdp,
    /// Channel, then die, then way, then plane.
    Cdwp,
    /// Way, then channel, then die, then plane.
    Wcdp,
}

impl Scheme {
    pub const ALL: [Scheme; 3] = [Scheme::Cwdp, Scheme::Cdwp, Scheme::Wcdp];

    pub fn as_str(self) -> &'static str {
        match self {
            Scheme::Cwdp => "cwdp",
            Scheme::Cdwp => "cdwp",
            Scheme::Wcdp => "wcdp",
        }
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Scheme {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "cwdp" => Ok(Scheme::Cwdp),
            "cdwp" => Ok(Scheme::Cdwp),
            "wcdp" => Ok(Scheme::Wcdp),
            other => Err(format!("unknown scheme `{other}`")),
        }
    }
}

#[derive(Clone, Copy)]
enum Axis {
    Channel,
    Way,
    Die,
    Plane,
}

/// Every plane of `geometry`, ordered so that the scheme's first axis
/// changes between consecutive entries.
pub fn plane_order(scheme: Scheme, geometry: &FlashGeometry) -> Vec<PlaneAddr> {
    use Axis::*;
    // fastest-varying axis first
    let axes = match scheme {
        Scheme::Cwdp => [Channel, Way, Die, Plane],
        Scheme::Cdwp => [Channel, Die, Way, Plane],
        Scheme::Wcdp => [Way, Channel, Die, Plane],
    };
    let extent = |a: Axis| match a {
        Channel => geometry.channels,
        Way => geometry.ways_per_channel,
        Die => geometry.dies_per_way,
        Plane => geometry.planes_per_die,
    };
    let total = geometry.total_planes();
    let mut out = Vec::with_capacity(total as usize);
    for index in 0..total {
        let mut rest = index;
        let mut addr = PlaneAddr {
            channel: 0,
            way: 0,
            die: 0,
            plane: 0,
        };
        for axis in axes {
            let n = extent(axis);
            let v = rest % n;
            rest /= n;
            match axis {
                Channel => addr.channel = v,
                Way => addr.way = v,
                Die => addr.die = v,
                Plane => addr.plane = v,
            }
        }
        out.push(addr);
    }
    out
}

/// One `(cX,wX,dX,pX)` entry per line.
pub fn format_plane_order(order: &[PlaneAddr]) -> String {
    let mut s = String::new();
    for p in order {
        s.push_str(&p.to_string());
        s.push('\n');
    }
    s
}
