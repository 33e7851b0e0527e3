use crate::image::GrayMap;

/// Symmetric sparse matrix in compressed-row form with sorted columns and no
/// diagonal entries.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseAffinity {
    pub n: usize,
    pub indptr: Vec<usize>,
    pub indices: Vec<usize>,
    pub values: Vec<f64>,
}

impl SparseAffinity {
    pub fn row(&self, i: usize) -> (&[usize], &[f64]) {
        let r = self.indptr[i]..self.indptr[i + 1];
        (&self.indices[r.clone()], &self.values[r])
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let (cols, vals) = self.row(i);
        cols.binary_search(&j).map(|k| vals[k]).unwrap_or(0.0)
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    /// Row sums.
    pub fn degrees(&self) -> Vec<f64> {
        (0..self.n).map(|i| self.row(i).1.iter().sum()).collect()
    }

    /// Largest `|i - j|` over stored entries.
    pub fn bandwidth(&self) -> usize {
        (0..self.n)
            .flat_map(|i| self.row(i).0.iter().map(move |&j| i.abs_diff(j)))
            .max()
            .unwrap_or(0)
    }

    /// `y = W x`.
    pub fn mul_vec(&self, x: &[f64], y: &mut [f64]) {
        for (i, yi) in y.iter_mut().enumerate() {
            let (cols, vals) = self.row(i);
            *yi = cols.iter().zip(vals).map(|(&j, &w)| w * x[j]).sum();
        }
    }

    pub fn permuted(&self, perm: &[usize]) -> SparseAffinity {
        // perm[old] = new
        let mut rows: Vec<Vec<(usize, f64)>> = vec![Vec::new(); self.n];
        for i in 0..self.n {
            let (cols, vals) = self.row(i);
            for (&j, &w) in cols.iter().zip(vals) {
                rows[perm[i]].push((perm[j], w));
            }
        }
        from_rows(rows)
    }
}

pub(crate) fn from_rows(mut rows: Vec<Vec<(usize, f64)>>) -> SparseAffinity {
    let n = rows.len();
    let mut indptr = Vec::with_capacity(n + 1);
    let mut indices = Vec::new();
    let mut values = Vec::new();
    indptr.push(0);
    for row in rows.iter_mut() {
        row.sort_by_key(|e| e.0);
        for &(j, w) in row.iter() {
            indices.push(j);
            values.push(w);
        }
        indptr.push(indices.len());
    }
    SparseAffinity { n, indptr, indices, values }
}

/// Integer midpoint line from `(r0, c0)` to `(r1, c1)`, both endpoints
/// included.
pub fn bresenham_line(r0: isize, c0: isize, r1: isize, c1: isize) -> Vec<(isize, isize)> {
    let dr = (r1 - r0).abs();
    let dc = -(c1 - c0).abs();
    let sr = if r0 < r1 { 1 } else { -1 };
    let sc = if c0 < c1 { 1 } else { -1 };
    let (mut r, mut c) = (r0, c0);
    let mut err = dr + dc;
    let mut out = Vec::with_capacity((dr.max(-dc) + 1) as usize);
    loop {
        out.push((r, c));
        if r == r1 && c == c1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dc {
            err += dc;
            r += sr;
        }
        if e2 <= dr {
            err += dr;
            c += sc;
        }
    }
    out
}

/// Intervening-contour affinity: every pixel is linked to the others in its
/// `(2·radius+1)²` window with `W_ij = exp(−max_p M(p)² / ρ)`, the max taken
/// over the rasterized segment between them. Lines are always traced from
/// the lower to the higher flat index, so `W` is exactly symmetric.
pub fn contour_affinity(m: &GrayMap, radius: usize, rho: f64) -> SparseAffinity {
    let (w, h) = (m.width, m.height);
    let n = w * h;
    let r = radius as isize;
    let mut rows: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
    for i in 0..n {
        let (ri, ci) = ((i / w) as isize, (i % w) as isize);
        for dr in 0..=r {
            for dc in -r..=r {
                if dr == 0 && dc <= 0 {
                    continue;
                }
                let (rj, cj) = (ri + dr, ci + dc);
                if rj >= h as isize || cj < 0 || cj >= w as isize {
                    continue;
                }
                let j = rj as usize * w + cj as usize;
                let peak = bresenham_line(ri, ci, rj, cj)
                    .into_iter()
                    .map(|(y, x)| m.data[y as usize * w + x as usize])
                    .fold(0.0f64, |a, v| a.max(v * v));
                let wij = (-peak / rho).exp();
                rows[i].push((j, wij));
                rows[j].push((i, wij));
            }
        }
    }
    from_rows(rows)
}
