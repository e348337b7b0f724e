//! Zero contours of 2-D slices by marching squares.

use crate::grid::Slice2;

/// Polylines of the `level` contour. Segments are chained where their end
/// points coincide; closed loops repeat their first point at the end.
pub fn marching_squares(slice: &Slice2, level: f64) -> Vec<Vec<[f64; 2]>> {
    let (xs, ys, v) = (&slice.xs, &slice.ys, &slice.values);
    let mut segments: Vec<([f64; 2], [f64; 2])> = Vec::new();
    let lerp = |a: [f64; 2], b: [f64; 2], fa: f64, fb: f64| {
        let t = if fb != fa { (level - fa) / (fb - fa) } else { 0.5 };
        [a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])]
    };
    for i in 0..xs.len().saturating_sub(1) {
        for j in 0..ys.len().saturating_sub(1) {
            // corners counter-clockwise from (i, j)
            let p = [[xs[i], ys[j]], [xs[i + 1], ys[j]], [xs[i + 1], ys[j + 1]], [xs[i], ys[j + 1]]];
            let f = [v[i][j], v[i + 1][j], v[i + 1][j + 1], v[i][j + 1]];
            let code = f
                .iter()
                .enumerate()
                .fold(0u8, |c, (k, fk)| c | (((*fk >= level) as u8) << k));
            if code == 0 || code == 15 {
                continue;
            }
            let edge = |e: usize| {
                let (a, b) = (e, (e + 1) % 4);
                lerp(p[a], p[b], f[a], f[b])
            };
            // edges crossed, paired; saddles resolved by the centre value
            let pairs: &[(usize, usize)] = match code {
                1 | 14 => &[(3, 0)],
                2 | 13 => &[(0, 1)],
                3 | 12 => &[(3, 1)],
                4 | 11 => &[(1, 2)],
                6 | 9 => &[(0, 2)],
                7 | 8 => &[(2, 3)],
                5 | 10 => {
                    let centre = 0.25 * f.iter().sum::<f64>();
                    if (centre >= level) == (code == 5) {
                        &[(3, 2), (0, 1)]
                    } else {
                        &[(3, 0), (1, 2)]
                    }
                }
                _ => unreachable!(),
            };
            for &(a, b) in pairs {
                let (pa, pb) = (edge(a), edge(b));
                // contours through a node produce degenerate pieces
                if !close(pa, pb) {
                    segments.push((pa, pb));
                }
            }
        }
    }
    chain(segments)
}

fn close(a: [f64; 2], b: [f64; 2]) -> bool {
    (a[0] - b[0]).abs() < 1e-9 && (a[1] - b[1]).abs() < 1e-9
}

fn chain(mut segments: Vec<([f64; 2], [f64; 2])>) -> Vec<Vec<[f64; 2]>> {
    let mut lines = Vec::new();
    while let Some((a, b)) = segments.pop() {
        let mut line = vec![a, b];
        loop {
            let tail = *line.last().unwrap();
            let head = line[0];
            if let Some(k) = segments.iter().position(|(p, q)| close(*p, tail) || close(*q, tail)) {
                let (p, q) = segments.swap_remove(k);
                line.push(if close(p, tail) { q } else { p });
            } else if let Some(k) = segments.iter().position(|(p, q)| close(*p, head) || close(*q, head)) {
                let (p, q) = segments.swap_remove(k);
                line.insert(0, if close(p, head) { q } else { p });
            } else {
                break;
            }
        }
        lines.push(line);
    }
    lines
}

/// CSV with header `line,x,y`; one row per polyline vertex.
pub fn polylines_to_csv(lines: &[Vec<[f64; 2]>]) -> String {
    let mut s = String::from("line,x,y\n");
    for (i, l) in lines.iter().enumerate() {
        for p in l {
            s.push_str(&format!("{i},{:.16e},{:.16e}\n", p[0], p[1]));
        }
    }
    s
}
