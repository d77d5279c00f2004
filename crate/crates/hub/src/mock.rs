//! Stand-in plugins: a detector, a trainer and an embedder that are cheap and
//! fully deterministic. The `mock-*` binaries wrap these functions, and the
//! trace replayer calls them in-process.

use std::fs;
use std::io::{self, BufRead, Write};
use std::path::{Path, PathBuf};

use image::ImageReader;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};
use teachhub_core::annotations::{parse_prediction_file, ClassMap};
use teachhub_core::datastore::write_atomic;
use teachhub_core::diversity::{serialize_embeddings, EmbeddingTable, FeatureVector};

use crate::protocol::{decode, Envelope, ErrorCode, Message, PredictedBox, Predictions};

/// Where the mock detector gets its boxes.
#[derive(Debug, Clone)]
pub enum DetectorSource {
    /// Pseudo-random boxes from the seed, the frame id and the model version.
    Seeded { seed: u64, classes: u32 },
    /// `<dir>/<frame_id>.txt` in prediction format; a missing file means no boxes.
    Fixtures { dir: PathBuf, class_map: ClassMap },
}

impl DetectorSource {
    pub fn fixtures(dir: PathBuf) -> io::Result<Self> {
        let classes = dir.join("classes.txt");
        let class_map = if classes.is_file() {
            ClassMap::parse(&fs::read_to_string(&classes)?).map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))?
        } else {
            ClassMap::door_handle()
        };
        Ok(DetectorSource::Fixtures { dir, class_map })
    }

    pub fn predict(&self, frame_id: &str, model_version: &str) -> io::Result<Vec<PredictedBox>> {
        match self {
            DetectorSource::Seeded { seed, classes } => Ok(seeded_boxes(*seed, *classes, frame_id, model_version)),
            DetectorSource::Fixtures { dir, class_map } => {
                let path = dir.join(format!("{frame_id}.txt"));
                if !path.is_file() {
                    return Ok(Vec::new());
                }
                let text = fs::read_to_string(&path)?;
                let detections = parse_prediction_file(&text, class_map, model_version)
                    .map_err(|e| io::Error::new(io::ErrorKind::InvalidData, format!("{}: {e}", path.display())))?;
                Ok(detections
                    .into_iter()
                    .map(|d| PredictedBox {
                        class_id: d.bbox.class_id,
                        class_name: class_map.name(d.bbox.class_id).unwrap_or_default().to_string(),
                        cx: d.bbox.cx,
                        cy: d.bbox.cy,
                        w: d.bbox.w,
                        h: d.bbox.h,
                        confidence: d.confidence,
                    })
                    .collect())
            }
        }
    }
}

fn stable_seed(parts: &[&[u8]]) -> u64 {
    let mut hasher = Sha256::new();
    for p in parts {
        hasher.update((p.len() as u64).to_le_bytes());
        hasher.update(p);
    }
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest is 32 bytes"))
}

fn seeded_boxes(seed: u64, classes: u32, frame_id: &str, model_version: &str) -> Vec<PredictedBox> {
    let mut rng = ChaCha8Rng::seed_from_u64(stable_seed(&[
        &seed.to_le_bytes(),
        frame_id.as_bytes(),
        model_version.as_bytes(),
    ]));
    let n = rng.random_range(0..=3);
    (0..n)
        .map(|_| {
            let w: f64 = rng.random_range(0.05..0.4);
            let h: f64 = rng.random_range(0.05..0.4);
            PredictedBox {
                class_id: rng.random_range(0..classes.max(1)),
                class_name: String::new(),
                cx: rng.random_range(w / 2.0..=1.0 - w / 2.0),
                cy: rng.random_range(h / 2.0..=1.0 - h / 2.0),
                w,
                h,
                confidence: rng.random_range(0.05..1.0),
            }
        })
        .collect()
}

/// Answers one detector input line. Frames get predictions; anything else
/// gets an error line.
pub fn detector_reply(line: &str, source: &DetectorSource, model_version: &str, seq: u64) -> String {
    let reply = match decode(line) {
        Ok(Envelope { message: Message::Frame(frame), ts, .. }) => match source.predict(&frame.frame_id, model_version) {
            Ok(boxes) => Envelope::new(
                seq,
                ts,
                Message::Predictions(Predictions {
                    frame_id: frame.frame_id,
                    model_version: model_version.to_string(),
                    boxes,
                }),
            ),
            Err(e) => Envelope::new(seq, ts, Message::error(ErrorCode::Internal, e.to_string(), None)),
        },
        Ok(env) => Envelope::new(
            seq,
            env.ts,
            Message::error(ErrorCode::BadRole, format!("detector only accepts frames, got `{}`", env.message.type_name()), Some(env.seq)),
        ),
        Err(e) => Envelope::new(seq, 0, Message::error(e.code, e.message, e.seq)),
    };
    reply.encode()
}

/// Runs the detector protocol until `input` ends.
pub fn run_detector(input: impl BufRead, mut output: impl Write, source: &DetectorSource, model_version: &str) -> io::Result<()> {
    let mut seq = 0;
    for line in input.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        seq += 1;
        writeln!(output, "{}", detector_reply(&line, source, model_version, seq))?;
        output.flush()?;
    }
    Ok(())
}

/// Copies the base weights and appends a note naming how many labeled
/// samples the dataset held.
pub fn train(dataset: &Path, base_weights: &Path, out_weights: &Path) -> io::Result<()> {
    let mut weights = fs::read(base_weights)?;
    let labels = count_files(&dataset.join("labels"), "txt")?;
    weights.extend_from_slice(format!("mock fine-tune on {labels} labeled samples\n").as_bytes());
    write_atomic(out_weights, &weights).map_err(io::Error::other)
}

fn count_files(dir: &Path, extension: &str) -> io::Result<usize> {
    if !dir.is_dir() {
        return Ok(0);
    }
    let mut n = 0;
    for entry in fs::read_dir(dir)? {
        if entry?.path().extension().is_some_and(|e| e == extension) {
            n += 1;
        }
    }
    Ok(n)
}

/// Number of values [`image_features`] produces.
pub const FEATURE_DIM: usize = 8;

/// Mean R, G, B, luma spread and the mean luma of each image quadrant, all
/// in [0, 1].
pub fn image_features(bytes: &[u8]) -> io::Result<FeatureVector> {
    let img = ImageReader::new(io::Cursor::new(bytes))
        .with_guessed_format()?
        .decode()
        .map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))?
        .to_rgb8();
    let (w, h) = img.dimensions();
    let mut rgb = [0f64; 3];
    let mut quad = [(0f64, 0usize); 4];
    let mut luma_sum = 0.0;
    let mut luma_sq = 0.0;
    for (x, y, p) in img.enumerate_pixels() {
        let [r, g, b] = p.0.map(|c| c as f64 / 255.0);
        rgb[0] += r;
        rgb[1] += g;
        rgb[2] += b;
        let luma = 0.299 * r + 0.587 * g + 0.114 * b;
        luma_sum += luma;
        luma_sq += luma * luma;
        let q = usize::from(x * 2 >= w) + 2 * usize::from(y * 2 >= h);
        quad[q].0 += luma;
        quad[q].1 += 1;
    }
    let n = (w as f64 * h as f64).max(1.0);
    let mean_luma = luma_sum / n;
    let spread = (luma_sq / n - mean_luma * mean_luma).max(0.0).sqrt();
    let mut v = vec![rgb[0] / n, rgb[1] / n, rgb[2] / n, spread];
    v.extend(quad.iter().map(|(s, c)| if *c == 0 { mean_luma } else { s / *c as f64 }));
    Ok(FeatureVector::new(v))
}

/// Embeds every image under `<dataset>/images`, keyed by file stem.
pub fn embed_dataset(dataset: &Path) -> io::Result<EmbeddingTable> {
    let dir = dataset.join("images");
    let mut table = EmbeddingTable::new();
    let mut paths: Vec<PathBuf> = fs::read_dir(&dir)?.map(|e| e.map(|e| e.path())).collect::<Result<_, _>>()?;
    paths.sort();
    for path in paths {
        let Some(stem) = path.file_stem().and_then(|s| s.to_str()) else { continue };
        let features = image_features(&fs::read(&path)?)
            .map_err(|e| io::Error::new(e.kind(), format!("{}: {e}", path.display())))?;
        table.insert(stem.to_string(), features);
    }
    Ok(table)
}

pub fn write_embeddings(dataset: &Path, out: &Path) -> io::Result<usize> {
    let table = embed_dataset(dataset)?;
    let text = serialize_embeddings(&table).map_err(io::Error::other)?;
    write_atomic(out, text.as_bytes()).map_err(io::Error::other)?;
    Ok(table.len())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seeded_boxes_are_stable_and_valid() {
        let a = seeded_boxes(7, 2, "f1", "v0");
        assert_eq!(a, seeded_boxes(7, 2, "f1", "v0"));
        let map = ClassMap::door_handle();
        for seed in 0..200 {
            for b in seeded_boxes(seed, 2, &format!("frame-{seed}"), "v1") {
                b.to_box().validated(&map).unwrap();
                assert!((0.0..1.0).contains(&b.confidence));
            }
        }
    }

    #[test]
    fn detector_answers_every_line() {
        let source = DetectorSource::Seeded { seed: 1, classes: 2 };
        let input = "{\"type\":\"hello\",\"seq\":1,\"ts\":0,\"role\":\"source\"}\nnot json\n";
        let mut out = Vec::new();
        run_detector(input.as_bytes(), &mut out, &source, "v0").unwrap();
        let lines: Vec<_> = String::from_utf8(out).unwrap().lines().map(|l| decode(l).unwrap()).collect();
        assert_eq!(lines.len(), 2);
        assert!(lines.iter().all(|e| matches!(e.message, Message::Error(_))));
    }

    #[test]
    fn trainer_appends_a_note() {
        let dir = tempfile::tempdir().unwrap();
        fs::create_dir(dir.path().join("labels")).unwrap();
        fs::write(dir.path().join("labels/a.txt"), "").unwrap();
        fs::write(dir.path().join("base.bin"), b"v0").unwrap();
        train(dir.path(), &dir.path().join("base.bin"), &dir.path().join("out.bin")).unwrap();
        assert_eq!(fs::read(dir.path().join("out.bin")).unwrap(), b"v0mock fine-tune on 1 labeled samples\n");
    }
}
