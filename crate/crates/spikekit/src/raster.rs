//! Raster CSV: header `time,neuron,value`, one event per line.

use std::io::{Read, Write};

use spikekit_core::analyzer::RasterRow;

use crate::{Error, Result};

pub fn write_raster(w: impl Write, rows: &[RasterRow]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    // serializing the first row emits the header; an empty raster still needs one
    if rows.is_empty() {
        out.write_record(["time", "neuron", "value"]).map_err(csv_err)?;
    }
    for r in rows {
        out.serialize(r).map_err(csv_err)?;
    }
    out.flush().map_err(|e| Error::io("<raster>", e))
}

pub fn read_raster(r: impl Read) -> Result<Vec<RasterRow>> {
    let mut rdr = csv::Reader::from_reader(r);
    let header = rdr.headers().map_err(csv_err)?;
    if header != vec!["time", "neuron", "value"] {
        return Err(Error::Format(format!("unexpected raster header {header:?}")));
    }
    rdr.deserialize().map(|row| row.map_err(csv_err)).collect()
}

fn csv_err(e: csv::Error) -> Error {
    Error::Format(format!("raster csv: {e}"))
}
