//! Closed triangle-mesh primitives (outward orientation, CCW winding).
//! Building blocks for the procedural assets and for geometric tests.

use std::collections::HashMap;

/// Signed volume of a closed triangle mesh (positive for outward
/// orientation).
pub fn signed_volume(vertices: &[f64], triangles: &[[usize; 3]]) -> f64 {
    let mut vol = 0.0;
    for t in triangles {
        let a = &vertices[t[0] * 3..t[0] * 3 + 3];
        let b = &vertices[t[1] * 3..t[1] * 3 + 3];
        let c = &vertices[t[2] * 3..t[2] * 3 + 3];
        vol += a[0] * (b[1] * c[2] - b[2] * c[1]) - a[1] * (b[0] * c[2] - b[2] * c[0])
            + a[2] * (b[0] * c[1] - b[1] * c[0]);
    }
    vol / 6.0
}

/// Icosphere: unit icosahedron subdivided `subdivisions` times, vertices
/// normalized onto a sphere of `radius`. `20 * 4^n` triangles,
/// `10 * 4^n + 2` vertices, closed and outward-oriented.
pub fn icosphere(subdivisions: usize, radius: f64) -> (Vec<f64>, Vec<[usize; 3]>) {
    let phi = (1.0 + 5.0f64.sqrt()) / 2.0;
    let mut verts: Vec<[f64; 3]> = vec![
        [-1.0, phi, 0.0],
        [1.0, phi, 0.0],
        [-1.0, -phi, 0.0],
        [1.0, -phi, 0.0],
        [0.0, -1.0, phi],
        [0.0, 1.0, phi],
        [0.0, -1.0, -phi],
        [0.0, 1.0, -phi],
        [phi, 0.0, -1.0],
        [phi, 0.0, 1.0],
        [-phi, 0.0, -1.0],
        [-phi, 0.0, 1.0],
    ];
    let mut tris: Vec<[usize; 3]> = vec![
        [0, 11, 5],
        [0, 5, 1],
        [0, 1, 7],
        [0, 7, 10],
        [0, 10, 11],
        [1, 5, 9],
        [5, 11, 4],
        [11, 10, 2],
        [10, 7, 6],
        [7, 1, 8],
        [3, 9, 4],
        [3, 4, 2],
        [3, 2, 6],
        [3, 6, 8],
        [3, 8, 9],
        [4, 9, 5],
        [2, 4, 11],
        [6, 2, 10],
        [8, 6, 7],
        [9, 8, 1],
    ];
    for _ in 0..subdivisions {
        let mut midpoint: HashMap<(usize, usize), usize> = HashMap::new();
        let mut next = Vec::with_capacity(tris.len() * 4);
        for t in &tris {
            let mut mid = [0usize; 3];
            for (k, (i, j)) in [(t[0], t[1]), (t[1], t[2]), (t[2], t[0])].into_iter().enumerate() {
                let key = (i.min(j), i.max(j));
                mid[k] = *midpoint.entry(key).or_insert_with(|| {
                    let a = verts[i];
                    let b = verts[j];
                    verts.push([(a[0] + b[0]) / 2.0, (a[1] + b[1]) / 2.0, (a[2] + b[2]) / 2.0]);
                    verts.len() - 1
                });
            }
            next.push([t[0], mid[0], mid[2]]);
            next.push([t[1], mid[1], mid[0]]);
            next.push([t[2], mid[2], mid[1]]);
            next.push([mid[0], mid[1], mid[2]]);
        }
        tris = next;
    }
    let mut flat = Vec::with_capacity(verts.len() * 3);
    for v in &verts {
        let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        flat.push(v[0] / n * radius);
        flat.push(v[1] / n * radius);
        flat.push(v[2] / n * radius);
    }
    debug_assert!(signed_volume(&flat, &tris) > 0.0, "icosphere must be outward-oriented");
    (flat, tris)
}

/// Axis-aligned closed box centered at `center` with the given half
/// extents: 8 vertices, 12 outward-oriented triangles.
pub fn box_mesh(center: [f64; 3], half_extents: [f64; 3]) -> (Vec<f64>, Vec<[usize; 3]>) {
    let [cx, cy, cz] = center;
    let [hx, hy, hz] = half_extents;
    let mut verts = Vec::with_capacity(24);
    // Corner i has bit 0 -> +x, bit 1 -> +y, bit 2 -> +z.
    for i in 0..8 {
        verts.push(cx + if i & 1 != 0 { hx } else { -hx });
        verts.push(cy + if i & 2 != 0 { hy } else { -hy });
        verts.push(cz + if i & 4 != 0 { hz } else { -hz });
    }
    let tris = vec![
        // -z face (normal -z)
        [0, 2, 3],
        [0, 3, 1],
        // +z face
        [4, 5, 7],
        [4, 7, 6],
        // -y face
        [0, 1, 5],
        [0, 5, 4],
        // +y face
        [2, 6, 7],
        [2, 7, 3],
        // -x face
        [0, 4, 6],
        [0, 6, 2],
        // +x face
        [1, 3, 7],
        [1, 7, 5],
    ];
    debug_assert!(signed_volume(&verts, &tris) > 0.0, "box must be outward-oriented");
    (verts, tris)
}

/// One full midpoint-subdivision pass (1 triangle -> 4). New midpoint
/// vertices are plain edge averages appended after the originals, so the
/// input vertices survive as a prefix with unchanged indices.
pub fn subdivide_mesh(vertices: &[f64], triangles: &[[usize; 3]]) -> (Vec<f64>, Vec<[usize; 3]>) {
    let mut verts = vertices.to_vec();
    let mut midpoint: HashMap<(usize, usize), usize> = HashMap::new();
    let mut next = Vec::with_capacity(triangles.len() * 4);
    for t in triangles {
        let mut mid = [0usize; 3];
        for (k, (i, j)) in [(t[0], t[1]), (t[1], t[2]), (t[2], t[0])].into_iter().enumerate() {
            let key = (i.min(j), i.max(j));
            mid[k] = *midpoint.entry(key).or_insert_with(|| {
                for d in 0..3 {
                    let m = (vertices[i * 3 + d] + vertices[j * 3 + d]) / 2.0;
                    verts.push(m);
                }
                verts.len() / 3 - 1
            });
        }
        next.push([t[0], mid[0], mid[2]]);
        next.push([t[1], mid[1], mid[0]]);
        next.push([t[2], mid[2], mid[1]]);
        next.push([mid[0], mid[1], mid[2]]);
    }
    (verts, next)
}

/// Splits the first `n_splits` edges (in ascending `(min, max)` index
/// order) at their midpoints. Each split adds one vertex and replaces the
/// two incident triangles with four, preserving orientation and
/// closedness. Original vertices keep their indices.
pub fn split_edges(
    vertices: &[f64],
    triangles: &[[usize; 3]],
    n_splits: usize,
) -> (Vec<f64>, Vec<[usize; 3]>) {
    let mut edges: Vec<(usize, usize)> = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for t in triangles {
        for (i, j) in [(t[0], t[1]), (t[1], t[2]), (t[2], t[0])] {
            let key = (i.min(j), i.max(j));
            if seen.insert(key) {
                edges.push(key);
            }
        }
    }
    edges.sort_unstable();
    assert!(n_splits <= edges.len(), "cannot split {n_splits} of {} edges", edges.len());
    let mut verts = vertices.to_vec();
    let mut tris = triangles.to_vec();
    for &(a, b) in edges.iter().take(n_splits) {
        for d in 0..3 {
            verts.push((verts[a * 3 + d] + verts[b * 3 + d]) / 2.0);
        }
        let m = verts.len() / 3 - 1;
        let mut replaced = Vec::new();
        tris.retain(|t| {
            let pairs = [(t[0], t[1], t[2]), (t[1], t[2], t[0]), (t[2], t[0], t[1])];
            for (x, y, z) in pairs {
                if (x == a && y == b) || (x == b && y == a) {
                    replaced.push([x, m, z]);
                    replaced.push([m, y, z]);
                    return false;
                }
            }
            true
        });
        tris.extend(replaced);
    }
    (verts, tris)
}
