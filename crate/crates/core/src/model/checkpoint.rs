use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::config::ModelConfig;
use super::network::FRec;
use crate::data::ItemCatalog;
use crate::error::{Error, Result};
use crate::numerics::ParamStore;

const FORMAT: &str = "frec-checkpoint-1";

/// Writes the parameters together with the model configuration and the
/// item catalog (`id:category` pairs in dense-index order).
pub fn write_checkpoint<W: Write>(model: &FRec, catalog: &ItemCatalog, w: W) -> Result<()> {
    if catalog.len() != model.n_items() {
        return Err(Error::Checkpoint(format!(
            "catalog has {} items, embedding table {}",
            catalog.len(),
            model.n_items()
        )));
    }
    let config = serde_json::to_string(&model.config).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let pairs = catalog
        .ids()
        .iter()
        .map(|&id| catalog.category_of(id).map(|c| format!("{id}:{c}")))
        .collect::<Result<Vec<_>>>()?;
    let manifest = BTreeMap::from([
        ("format".to_string(), FORMAT.to_string()),
        ("model".to_string(), config),
        ("catalog".to_string(), pairs.join(",")),
    ]);
    model.store.write_archive(w, &manifest)
}

pub fn read_checkpoint<R: Read>(r: R) -> Result<(FRec, ItemCatalog)> {
    let (loaded, manifest) = ParamStore::read_archive(r)?;
    let field = |key: &str| manifest.get(key).ok_or_else(|| Error::Checkpoint(format!("manifest lacks {key:?}")));
    if field("format")? != FORMAT {
        return Err(Error::Checkpoint(format!("unsupported format {:?}", field("format")?)));
    }
    let config: ModelConfig = serde_json::from_str(field("model")?).map_err(|e| Error::Checkpoint(format!("model config: {e}")))?;
    let catalog = ItemCatalog::from_pairs(parse_catalog(field("catalog")?)?);
    let mut model = FRec::new(config, catalog.len(), 0)?;
    if loaded.len() != model.store.len() {
        return Err(Error::Checkpoint(format!(
            "{} tensors stored, model expects {}",
            loaded.len(),
            model.store.len()
        )));
    }
    let ids: Vec<_> = model.store.ids().collect();
    for id in ids {
        let name = model.store.name(id).to_string();
        let src = loaded.id_of(&name).ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
        if loaded.kind(src) != model.store.kind(id) {
            return Err(Error::Checkpoint(format!("{name}: kind mismatch")));
        }
        model
            .store
            .set(id, loaded.get(src).clone())
            .map_err(|e| Error::Checkpoint(format!("{name}: {e}")))?;
    }
    Ok((model, catalog))
}

fn parse_catalog(text: &str) -> Result<Vec<(u64, u64)>> {
    if text.is_empty() {
        return Ok(Vec::new());
    }
    text.split(',')
        .map(|pair| {
            let parsed = pair.split_once(':').and_then(|(i, c)| Some((i.parse().ok()?, c.parse().ok()?)));
            parsed.ok_or_else(|| Error::Checkpoint(format!("malformed catalog entry {pair:?}")))
        })
        .collect()
}

pub fn save_checkpoint(model: &FRec, catalog: &ItemCatalog, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_checkpoint(model, catalog, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(FRec, ItemCatalog)> {
    read_checkpoint(BufReader::new(File::open(path)?))
}
