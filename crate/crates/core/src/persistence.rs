//! Superlevel-set persistent homology on 2D pixel grids.
//!
//! Dimension 0 is computed by a union-find sweep over pixels in decreasing
//! value order with 4-connectivity. Dimension 1 uses the (4, 8) digital
//! duality: holes of the superlevel set are the bounded 8-connected
//! components of its complement, so a second sweep in increasing value order
//! over the complement (with a virtual node standing in for the unbounded
//! outside) yields the loop pairs.
//!
//! Ties between equal values are broken by row-major index, which makes the
//! sweep order, the diagram, and the reported critical pixels deterministic.

use std::cmp::Ordering;
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::field::{gaussian_smooth, BinaryMask2D, ScalarField2D};
use crate::scalar::Real;

/// Disjoint-set forest with path halving and union by size.
#[derive(Debug, Clone)]
pub struct UnionFind {
    parent: Vec<usize>,
    size: Vec<usize>,
}

impl UnionFind {
    pub fn new(n: usize) -> Self {
        Self { parent: (0..n).collect(), size: vec![1; n] }
    }

    pub fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    /// Joins the sets of `a` and `b`; returns the surviving root.
    pub fn union(&mut self, a: usize, b: usize) -> usize {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra == rb {
            return ra;
        }
        let (big, small) = if self.size[ra] >= self.size[rb] { (ra, rb) } else { (rb, ra) };
        self.parent[small] = big;
        self.size[big] += self.size[small];
        big
    }
}

pub type Pixel = (usize, usize);

/// A single birth/death pair of the superlevel filtration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PersistencePair<T> {
    pub dim: u8,
    pub birth_value: T,
    pub death_value: T,
    pub birth_pixel: Pixel,
    pub death_pixel: Pixel,
    /// The component that never dies (its death is reported as the field minimum).
    pub essential: bool,
}

impl<T: Real> PersistencePair<T> {
    #[inline]
    pub fn persistence(&self) -> T {
        self.birth_value - self.death_value
    }

    /// Whether this class is alive in the superlevel set at `level`.
    #[inline]
    pub fn alive_at(&self, level: T) -> bool {
        if self.essential {
            self.birth_value >= level
        } else {
            self.birth_value >= level && level > self.death_value
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PersistenceDiagram<T> {
    /// Essential pair first, then finite dim-0 pairs, then dim-1 pairs, each
    /// group in the order the sweep produced them.
    pairs: Vec<PersistencePair<T>>,
}

impl<T: Real> PersistenceDiagram<T> {
    pub fn pairs(&self) -> &[PersistencePair<T>] {
        &self.pairs
    }

    pub fn essential(&self) -> &PersistencePair<T> {
        &self.pairs[0]
    }

    pub fn finite_pairs(&self) -> impl Iterator<Item = &PersistencePair<T>> {
        self.pairs.iter().filter(|p| !p.essential)
    }

    pub fn pairs_of_dim(&self, dim: u8) -> impl Iterator<Item = &PersistencePair<T>> {
        self.pairs.iter().filter(move |p| p.dim == dim)
    }

    /// Betti numbers of the superlevel set `{x | f(x) >= level}` read off the diagram.
    pub fn betti_at(&self, level: T) -> (usize, usize) {
        let count = |dim| self.pairs_of_dim(dim).filter(|p| p.alive_at(level)).count();
        (count(0), count(1))
    }

    /// One line per pair: `dim birth death b_row b_col d_row d_col`.
    /// The first dim-0 row is the essential pair.
    pub fn to_rows(&self) -> String {
        let mut out = String::new();
        for p in &self.pairs {
            let _ = writeln!(
                out,
                "{} {} {} {} {} {} {}",
                p.dim,
                p.birth_value,
                p.death_value,
                p.birth_pixel.0,
                p.birth_pixel.1,
                p.death_pixel.0,
                p.death_pixel.1
            );
        }
        out
    }

    pub fn from_rows(text: &str) -> Result<Self> {
        let mut pairs = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let bad = || Error::Value(format!("diagram row {}: `{line}`", lineno + 1));
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.len() != 7 {
                return Err(bad());
            }
            let int = |s: &str| s.parse::<usize>().map_err(|_| bad());
            let real = |s: &str| s.parse::<f64>().map(T::lit).map_err(|_| bad());
            let dim = match fields[0] {
                "0" => 0,
                "1" => 1,
                _ => return Err(bad()),
            };
            pairs.push(PersistencePair {
                dim,
                birth_value: real(fields[1])?,
                death_value: real(fields[2])?,
                birth_pixel: (int(fields[3])?, int(fields[4])?),
                death_pixel: (int(fields[5])?, int(fields[6])?),
                essential: false,
            });
        }
        match pairs.first_mut() {
            Some(p) if p.dim == 0 => p.essential = true,
            _ => return Err(Error::Value("diagram must start with the essential dim-0 row".into())),
        }
        Ok(Self { pairs })
    }
}

/// Pixel indices sorted by decreasing value, ties by increasing row-major index.
fn superlevel_order<T: Real>(values: &[T]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| {
        values[b].partial_cmp(&values[a]).unwrap_or(Ordering::Equal).then(a.cmp(&b))
    });
    order
}

/// Persistence diagram of the superlevel filtration of `field`.
pub fn superlevel_diagram<T: Real>(field: &ScalarField2D<T>) -> PersistenceDiagram<T> {
    let (h, w) = field.dims();
    let values = field.values();
    let n = values.len();
    let order = superlevel_order(values);
    let mut position = vec![0usize; n];
    for (pos, &p) in order.iter().enumerate() {
        position[p] = pos;
    }
    let pixel = |i: usize| (i / w, i % w);

    let first = order[0];
    let last = order[n - 1];
    let mut pairs = vec![PersistencePair {
        dim: 0,
        birth_value: values[first],
        death_value: values[last],
        birth_pixel: pixel(first),
        death_pixel: pixel(last),
        essential: true,
    }];

    // dim 0: components of the superlevel set, 4-connected
    {
        let mut uf = UnionFind::new(n);
        // root -> eldest pixel of its component
        let mut eldest: Vec<usize> = (0..n).collect();
        let mut added = vec![false; n];
        let mut roots: Vec<usize> = Vec::with_capacity(4);
        for &p in &order {
            added[p] = true;
            roots.clear();
            let (r, c) = (p / w, p % w);
            let mut visit = |q: usize, uf: &mut UnionFind| {
                if added[q] {
                    let root = uf.find(q);
                    if !roots.contains(&root) {
                        roots.push(root);
                    }
                }
            };
            if r > 0 {
                visit(p - w, &mut uf);
            }
            if r + 1 < h {
                visit(p + w, &mut uf);
            }
            if c > 0 {
                visit(p - 1, &mut uf);
            }
            if c + 1 < w {
                visit(p + 1, &mut uf);
            }
            if roots.is_empty() {
                continue;
            }
            roots.sort_by_key(|&root| position[eldest[root]]);
            let survivor_birth = eldest[roots[0]];
            for &young in &roots[1..] {
                let born = eldest[young];
                if values[born] > values[p] {
                    pairs.push(PersistencePair {
                        dim: 0,
                        birth_value: values[born],
                        death_value: values[p],
                        birth_pixel: pixel(born),
                        death_pixel: pixel(p),
                        essential: false,
                    });
                }
            }
            let mut root = uf.union(p, roots[0]);
            for &other in &roots[1..] {
                root = uf.union(root, other);
            }
            eldest[root] = survivor_birth;
        }
    }

    // dim 1: bounded 8-connected components of the complement, swept in
    // increasing value order; node `n` is the unbounded outside.
    {
        let outside = n;
        let mut uf = UnionFind::new(n + 1);
        // root -> lowest pixel (first added) of its component; outside is eldest
        let mut eldest: Vec<usize> = (0..=n).collect();
        let rank = |i: usize| if i == outside { 0 } else { n - position[i] };
        let mut added = vec![false; n];
        let mut roots: Vec<usize> = Vec::with_capacity(9);
        for &q in order.iter().rev() {
            added[q] = true;
            roots.clear();
            let (r, c) = (q / w, q % w);
            if r == 0 || c == 0 || r + 1 == h || c + 1 == w {
                roots.push(uf.find(outside));
            }
            for dr in -1isize..=1 {
                for dc in -1isize..=1 {
                    if dr == 0 && dc == 0 {
                        continue;
                    }
                    let (rr, cc) = (r as isize + dr, c as isize + dc);
                    if rr < 0 || cc < 0 || rr >= h as isize || cc >= w as isize {
                        continue;
                    }
                    let nb = rr as usize * w + cc as usize;
                    if added[nb] {
                        let root = uf.find(nb);
                        if !roots.contains(&root) {
                            roots.push(root);
                        }
                    }
                }
            }
            if roots.is_empty() {
                continue;
            }
            roots.sort_by_key(|&root| rank(eldest[root]));
            let survivor = eldest[roots[0]];
            for &young in &roots[1..] {
                let lowest = eldest[young];
                if values[q] > values[lowest] {
                    pairs.push(PersistencePair {
                        dim: 1,
                        birth_value: values[q],
                        death_value: values[lowest],
                        birth_pixel: pixel(q),
                        death_pixel: pixel(lowest),
                        essential: false,
                    });
                }
            }
            let mut root = uf.union(q, roots[0]);
            for &other in &roots[1..] {
                root = uf.union(root, other);
            }
            eldest[root] = survivor;
        }
    }

    PersistenceDiagram { pairs }
}

/// Creator and destroyer pixels of every pair with persistence `>= epsilon`,
/// plus the global maximum. Sorted row-major, without duplicates.
pub fn critical_pixels<T: Real>(diagram: &PersistenceDiagram<T>, epsilon: T) -> Result<Vec<Pixel>> {
    if !(epsilon >= T::zero()) {
        return Err(Error::param("epsilon", format!("{epsilon} must be >= 0")));
    }
    let mut out = vec![diagram.essential().birth_pixel];
    for p in diagram.finite_pairs().filter(|p| p.persistence() >= epsilon) {
        out.push(p.birth_pixel);
        out.push(p.death_pixel);
    }
    out.sort_unstable();
    out.dedup();
    Ok(out)
}

/// Soft map of topologically critical pixels, same size as its source field.
#[derive(Debug, Clone, PartialEq)]
pub struct CriticalPointMap<T> {
    pub field: ScalarField2D<T>,
}

/// Indicator of the critical pixels of `field`, blurred by [`gaussian_smooth`].
pub fn critical_point_map<T: Real>(
    field: &ScalarField2D<T>,
    epsilon: T,
    sigma: T,
) -> Result<CriticalPointMap<T>> {
    let diagram = superlevel_diagram(field);
    let pixels = critical_pixels(&diagram, epsilon)?;
    let w = field.width();
    let mut indicator = vec![T::zero(); field.len()];
    for (r, c) in pixels {
        indicator[r * w + c] = T::one();
    }
    let indicator = ScalarField2D::from_raw(w, field.height(), indicator);
    Ok(CriticalPointMap { field: gaussian_smooth(&indicator, sigma)? })
}

/// `(beta0, beta1)` of a mask: 4-connected foreground components, and
/// bounded 8-connected background components (holes).
pub fn betti_numbers(mask: &BinaryMask2D) -> (usize, usize) {
    let (h, w) = (mask.height(), mask.width());
    let bits = mask.bits();

    let mut fg = UnionFind::new(h * w);
    for r in 0..h {
        for c in 0..w {
            let i = r * w + c;
            if !bits[i] {
                continue;
            }
            if c + 1 < w && bits[i + 1] {
                fg.union(i, i + 1);
            }
            if r + 1 < h && bits[i + w] {
                fg.union(i, i + w);
            }
        }
    }
    let beta0 = (0..h * w).filter(|&i| bits[i] && fg.find(i) == i).count();

    let outside = h * w;
    let mut bg = UnionFind::new(h * w + 1);
    for r in 0..h {
        for c in 0..w {
            let i = r * w + c;
            if bits[i] {
                continue;
            }
            if r == 0 || c == 0 || r + 1 == h || c + 1 == w {
                bg.union(i, outside);
            }
            // forward half of the 8-neighbourhood
            let forward = [(0isize, 1isize), (1, -1), (1, 0), (1, 1)];
            for (dr, dc) in forward {
                let (rr, cc) = (r as isize + dr, c as isize + dc);
                if rr >= h as isize || cc < 0 || cc >= w as isize {
                    continue;
                }
                let j = rr as usize * w + cc as usize;
                if !bits[j] {
                    bg.union(i, j);
                }
            }
        }
    }
    let outer_root = bg.find(outside);
    let beta1 = (0..h * w)
        .filter(|&i| !bits[i] && bg.find(i) == i && i != outer_root)
        .count();
    (beta0, beta1)
}
