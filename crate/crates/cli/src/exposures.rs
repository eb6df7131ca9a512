use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use anyhow::{bail, Context, Result};
use fatigue_rec_core::data::{Event, Exposures, InteractionLog, LOG_HEADER};

/// Exposure log: the event columns plus `engaged` (0 or 1).
pub fn save_exposures(exposures: &Exposures, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
    writeln!(w, "{LOG_HEADER}\tengaged")?;
    for (e, &hit) in exposures.log.events.iter().zip(&exposures.engaged) {
        writeln!(w, "{}\t{}\t{}\t{}\t{}", e.user, e.item, e.category, e.timestamp, u8::from(hit))?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_exposures(path: &Path) -> Result<Exposures> {
    let reader = BufReader::new(File::open(path).with_context(|| format!("opening {}", path.display()))?);
    let mut events = Vec::new();
    let mut engaged = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        let number = idx + 1;
        if line.trim().is_empty() || (number == 1 && line.starts_with("user_id")) {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').map(str::trim).collect();
        let [user, item, category, timestamp, hit] = fields.as_slice() else {
            bail!("{}: line {number}: expected 5 fields, found {}", path.display(), fields.len());
        };
        let num = |name: &str, v: &str| v.parse::<u64>().with_context(|| format!("{}: line {number}: bad {name} {v:?}", path.display()));
        events.push(Event {
            user: num("user_id", user)?,
            item: num("item_id", item)?,
            category: num("category_id", category)?,
            timestamp: timestamp
                .parse()
                .with_context(|| format!("{}: line {number}: bad timestamp {timestamp:?}", path.display()))?,
        });
        engaged.push(match *hit {
            "0" => false,
            "1" => true,
            other => bail!("{}: line {number}: engaged must be 0 or 1, got {other:?}", path.display()),
        });
    }
    if events.is_empty() {
        bail!("{}: file contains no exposures", path.display());
    }
    Ok(Exposures {
        log: InteractionLog::new(events),
        engaged,
    })
}
