//! Zhang-Suen thinning.

/// Thins a binary `h x w` map to a one-pixel-wide 8-connected skeleton.
/// Pixels outside the map count as background.
pub fn skeletonize(mask: &[u8], h: usize, w: usize) -> Vec<u8> {
    assert_eq!(mask.len(), h * w, "skeletonize: mask size");
    let mut img: Vec<u8> = mask.iter().map(|&v| (v != 0) as u8).collect();
    let at = |img: &[u8], y: isize, x: isize| -> u8 {
        if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
            0
        } else {
            img[y as usize * w + x as usize]
        }
    };
    let mut doomed = Vec::new();
    loop {
        let mut changed = false;
        for pass in 0..2 {
            doomed.clear();
            for y in 0..h as isize {
                for x in 0..w as isize {
                    if img[y as usize * w + x as usize] == 0 {
                        continue;
                    }
                    // P2..P9 clockwise from north.
                    let p = [
                        at(&img, y - 1, x),
                        at(&img, y - 1, x + 1),
                        at(&img, y, x + 1),
                        at(&img, y + 1, x + 1),
                        at(&img, y + 1, x),
                        at(&img, y + 1, x - 1),
                        at(&img, y, x - 1),
                        at(&img, y - 1, x - 1),
                    ];
                    let b: u8 = p.iter().sum();
                    let a = (0..8).filter(|&i| p[i] == 0 && p[(i + 1) % 8] == 1).count();
                    if !(2..=6).contains(&b) || a != 1 {
                        continue;
                    }
                    let (n, e, s, wst) = (p[0], p[2], p[4], p[6]);
                    let keep = if pass == 0 {
                        n * e * s != 0 || e * s * wst != 0
                    } else {
                        n * e * wst != 0 || n * s * wst != 0
                    };
                    if !keep {
                        doomed.push(y as usize * w + x as usize);
                    }
                }
            }
            for &i in &doomed {
                img[i] = 0;
            }
            changed |= !doomed.is_empty();
        }
        if !changed {
            return img;
        }
    }
}

/// Number of 8-connected foreground components.
pub fn components(mask: &[u8], h: usize, w: usize) -> usize {
    let mut seen = vec![false; h * w];
    let mut count = 0;
    let mut stack = Vec::new();
    for start in 0..h * w {
        if mask[start] == 0 || seen[start] {
            continue;
        }
        count += 1;
        seen[start] = true;
        stack.push(start);
        while let Some(i) = stack.pop() {
            let (y, x) = ((i / w) as isize, (i % w) as isize);
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let (ny, nx) = (y + dy, x + dx);
                    if ny < 0 || nx < 0 || ny >= h as isize || nx >= w as isize {
                        continue;
                    }
                    let j = ny as usize * w + nx as usize;
                    if mask[j] != 0 && !seen[j] {
                        seen[j] = true;
                        stack.push(j);
                    }
                }
            }
        }
    }
    count
}
