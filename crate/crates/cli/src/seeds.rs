//! Counter-based seed splitting. Every generated object gets its seed from
//! `(master, domain, index)` alone, so reordering or parallelizing the work
//! never changes any single result.

/// Seed domains, one per kind of derived object.
#[derive(Debug, Clone, Copy)]
pub enum Domain {
    Graph = 0,
    Pool = 1,
    Instance = 2,
    Train = 3,
    Eval = 4,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Derives the seed for `index` within `domain` from the master seed.
pub fn subseed(master: u64, domain: Domain, index: u64) -> u64 {
    let lane = splitmix64(master ^ splitmix64(domain as u64 + 1));
    splitmix64(lane ^ splitmix64(index))
}
