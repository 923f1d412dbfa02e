//! Exact point-to-triangle distances with a bounding-volume hierarchy.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::{Mesh, Vec3};

/// Closest point on triangle `abc` to `p` (Ericson, Real-Time Collision
/// Detection, 5.1.5).
pub fn closest_point_on_triangle(p: &Vec3, a: &Vec3, b: &Vec3, c: &Vec3) -> Vec3 {
    let ab = b - a;
    let ac = c - a;
    let ap = p - a;
    let d1 = ab.dot(&ap);
    let d2 = ac.dot(&ap);
    if d1 <= 0.0 && d2 <= 0.0 {
        return *a;
    }
    let bp = p - b;
    let d3 = ab.dot(&bp);
    let d4 = ac.dot(&bp);
    if d3 >= 0.0 && d4 <= d3 {
        return *b;
    }
    let vc = d1 * d4 - d3 * d2;
    if vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0 {
        let v = d1 / (d1 - d3);
        return a + ab * v;
    }
    let cp = p - c;
    let d5 = ab.dot(&cp);
    let d6 = ac.dot(&cp);
    if d6 >= 0.0 && d5 <= d6 {
        return *c;
    }
    let vb = d5 * d2 - d1 * d6;
    if vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0 {
        let w = d2 / (d2 - d6);
        return a + ac * w;
    }
    let va = d3 * d6 - d5 * d4;
    if va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0 {
        let w = (d4 - d3) / ((d4 - d3) + (d5 - d6));
        return b + (c - b) * w;
    }
    let denom = 1.0 / (va + vb + vc);
    let v = vb * denom;
    let w = vc * denom;
    a + ab * v + ac * w
}

pub fn point_triangle_distance(p: &Vec3, a: &Vec3, b: &Vec3, c: &Vec3) -> f64 {
    (p - closest_point_on_triangle(p, a, b, c)).norm()
}

#[derive(Debug, Clone, Copy)]
struct Aabb {
    min: Vec3,
    max: Vec3,
}

impl Aabb {
    fn empty() -> Self {
        Self {
            min: Vec3::repeat(f64::INFINITY),
            max: Vec3::repeat(f64::NEG_INFINITY),
        }
    }

    fn grow(&mut self, p: &Vec3) {
        self.min = self.min.inf(p);
        self.max = self.max.sup(p);
    }

    fn merge(&mut self, o: &Aabb) {
        self.min = self.min.inf(&o.min);
        self.max = self.max.sup(&o.max);
    }

    fn distance_sq(&self, p: &Vec3) -> f64 {
        let mut d = 0.0;
        for k in 0..3 {
            let v = if p[k] < self.min[k] {
                self.min[k] - p[k]
            } else if p[k] > self.max[k] {
                p[k] - self.max[k]
            } else {
                0.0
            };
            d += v * v;
        }
        d
    }
}

#[derive(Debug, Clone)]
enum Node {
    Leaf {
        bounds: Aabb,
        first: usize,
        count: usize,
    },
    Inner {
        bounds: Aabb,
        left: usize,
        right: usize,
    },
}

impl Node {
    fn bounds(&self) -> &Aabb {
        match self {
            Node::Leaf { bounds, .. } | Node::Inner { bounds, .. } => bounds,
        }
    }
}

const LEAF_SIZE: usize = 4;

/// Nearest-triangle queries over an immutable mesh.
#[derive(Debug, Clone)]
pub struct Bvh {
    tris: Vec<[Vec3; 3]>,
    order: Vec<usize>,
    nodes: Vec<Node>,
}

/// Nearest surface point of a query.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Nearest {
    pub triangle: usize,
    pub point: Vec3,
    pub distance: f64,
}

impl Bvh {
    pub fn new(mesh: &Mesh) -> Result<Self> {
        mesh.validate()?;
        if mesh.triangles.is_empty() {
            return Err(Error::Validation("mesh has no triangles".into()));
        }
        let tris: Vec<[Vec3; 3]> = mesh
            .triangles
            .iter()
            .map(|t| t.map(|i| mesh.vertices[i]))
            .collect();
        let centroids: Vec<Vec3> = tris.iter().map(|t| (t[0] + t[1] + t[2]) / 3.0).collect();
        let mut order: Vec<usize> = (0..tris.len()).collect();
        let mut nodes = Vec::new();
        build(&tris, &centroids, &mut order, 0, tris.len(), &mut nodes);
        Ok(Self { tris, order, nodes })
    }

    pub fn nearest(&self, p: &Vec3) -> Nearest {
        let mut best = Nearest {
            triangle: usize::MAX,
            point: *p,
            distance: f64::INFINITY,
        };
        let mut best_sq = f64::INFINITY;
        let mut stack = vec![0usize];
        while let Some(n) = stack.pop() {
            let node = &self.nodes[n];
            if node.bounds().distance_sq(p) > best_sq {
                continue;
            }
            match node {
                Node::Leaf { first, count, .. } => {
                    for &t in &self.order[*first..*first + *count] {
                        let [a, b, c] = &self.tris[t];
                        let q = closest_point_on_triangle(p, a, b, c);
                        let d = (p - q).norm_squared();
                        if d < best_sq || (d == best_sq && t < best.triangle) {
                            best_sq = d;
                            best = Nearest {
                                triangle: t,
                                point: q,
                                distance: 0.0,
                            };
                        }
                    }
                }
                Node::Inner { left, right, .. } => {
                    let dl = self.nodes[*left].bounds().distance_sq(p);
                    let dr = self.nodes[*right].bounds().distance_sq(p);
                    if dl <= dr {
                        stack.push(*right);
                        stack.push(*left);
                    } else {
                        stack.push(*left);
                        stack.push(*right);
                    }
                }
            }
        }
        best.distance = best_sq.sqrt();
        best
    }

    pub fn triangle(&self, t: usize) -> &[Vec3; 3] {
        &self.tris[t]
    }
}

fn build(
    tris: &[[Vec3; 3]],
    centroids: &[Vec3],
    order: &mut [usize],
    first: usize,
    end: usize,
    nodes: &mut Vec<Node>,
) -> usize {
    let mut bounds = Aabb::empty();
    let mut cb = Aabb::empty();
    for &t in &order[first..end] {
        for v in &tris[t] {
            bounds.grow(v);
        }
        cb.grow(&centroids[t]);
    }
    let idx = nodes.len();
    if end - first <= LEAF_SIZE {
        nodes.push(Node::Leaf {
            bounds,
            first,
            count: end - first,
        });
        return idx;
    }
    let extent = cb.max - cb.min;
    let axis = if extent.x >= extent.y && extent.x >= extent.z {
        0
    } else if extent.y >= extent.z {
        1
    } else {
        2
    };
    let mid = (first + end) / 2;
    order[first..end].sort_by(|&a, &b| {
        centroids[a][axis]
            .total_cmp(&centroids[b][axis])
            .then(a.cmp(&b))
    });
    nodes.push(Node::Leaf {
        bounds,
        first,
        count: 0,
    });
    let left = build(tris, centroids, order, first, mid, nodes);
    let right = build(tris, centroids, order, mid, end, nodes);
    let mut merged = *nodes[left].bounds();
    merged.merge(nodes[right].bounds());
    nodes[idx] = Node::Inner {
        bounds: merged,
        left,
        right,
    };
    idx
}

/// Distance from every scan vertex to the closest point of `mesh`'s surface.
pub fn scan_to_mesh_distance(scan: &[Vec3], mesh: &Mesh) -> Result<Vec<f64>> {
    let bvh = Bvh::new(mesh)?;
    Ok(scan.par_iter().map(|p| bvh.nearest(p).distance).collect())
}

/// Same as [`scan_to_mesh_distance`] by scanning every triangle.
pub fn brute_force_distance(scan: &[Vec3], mesh: &Mesh) -> Result<Vec<f64>> {
    if mesh.triangles.is_empty() {
        return Err(Error::Validation("mesh has no triangles".into()));
    }
    Ok(scan
        .iter()
        .map(|p| {
            mesh.triangles
                .iter()
                .map(|t| {
                    let [a, b, c] = t.map(|i| mesh.vertices[i]);
                    point_triangle_distance(p, &a, &b, &c)
                })
                .fold(f64::INFINITY, f64::min)
        })
        .collect())
}
