//! `prototypes.json`: a [`PrototypeSet`] serialized with an explicit schema version.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::prototypes::PrototypeSet;

pub fn write_prototypes(path: impl AsRef<Path>, set: &PrototypeSet) -> Result<()> {
    set.validate()?;
    let path = path.as_ref();
    let text = serde_json::to_string_pretty(set).map_err(|e| Error::json(path, e))?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn read_prototypes(path: impl AsRef<Path>) -> Result<PrototypeSet> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let set: PrototypeSet = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
    set.validate()?;
    Ok(set)
}
