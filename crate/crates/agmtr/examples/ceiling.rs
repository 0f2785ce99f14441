use agmtr::dataset::{Dataset, SyntheticDatasetSpec};

fn main() {
    for (size, patch) in [(32usize, 2usize), (40, 2), (48, 2)] {
        let spec = SyntheticDatasetSpec {
            n_classes: 12,
            images_per_class: 10,
            image_size: size,
            seed: 100,
            ..Default::default()
        };
        let ds = Dataset::generate_in_memory(&spec).unwrap();
        let mut total = 0.0;
        let mut n = 0;
        let mut per_class = vec![(0.0f64, 0usize); 12];
        for (idx, mask) in ds.masks.iter().enumerate() {
            let class = ds.manifest.images[idx].class;
            let down = mask.downsample_majority(patch);
            let up = down.upsample_nearest(patch);
            let mut inter = 0u64;
            let mut union = 0u64;
            for (&p, &g) in up.data().iter().zip(mask.data()) {
                inter += (p & g) as u64;
                union += (p | g) as u64;
            }
            let iou = inter as f64 / union.max(1) as f64;
            total += iou;
            per_class[class].0 += iou;
            per_class[class].1 += 1;
            n += 1;
        }
        println!("image {size} patch {patch}: mean round-trip IoU ceiling {:.3}", total / n as f64);
        let names = agmtr::dataset::SHAPE_FAMILIES;
        for (c, (sum, cnt)) in per_class.iter().enumerate() {
            print!("  {}={:.2}", names[c], sum / *cnt as f64);
        }
        println!();
    }
}
