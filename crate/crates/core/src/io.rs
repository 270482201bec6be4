//! On-disk formats.
//!
//! * `EVT1`: binary event stream. Header (32 bytes, little-endian):
//!   `"EVT1" | width u16 | height u16 | t_start u64 | t_end u64 | count u64`,
//!   then `count` records of `t u64 | x u16 | y u16 | p u8 | pad u8` (14 bytes),
//!   where `p` is 0 for negative and 1 for positive polarity.
//! * CSV events: first line `# window t_start t_end width height`, then a
//!   `t,x,y,p` header and one event per line with `p` in {-1, 1}.
//! * PGM: binary `P5`, 8-bit. A value `v` reads as `v / maxval`.
//! * `PFG1`: `"PFG1" | width u16 | height u16` followed by row-major `f32` LE.
//! * `VOX1`: `"VOX1" | width u16 | height u16 | channels u16 | pad u16`
//!   followed by `f32` LE values, channel planes outermost.
//!
//! Events files are chosen by extension: `.csv` is CSV, anything else EVT1.
//! Images: `.pfg` is PFG1, anything else PGM.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{Event, EventStream, IntensityImage, Polarity, ThresholdMap, VoxelGrid};

pub const EVT1_MAGIC: &[u8; 4] = b"EVT1";
pub const PFG1_MAGIC: &[u8; 4] = b"PFG1";
pub const VOX1_MAGIC: &[u8; 4] = b"VOX1";

pub const EVT1_HEADER_LEN: usize = 32;
pub const EVT1_RECORD_LEN: usize = 14;

fn has_extension(path: &Path, ext: &str) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case(ext))
}

fn to_u16(v: usize, what: &str) -> Result<u16> {
    u16::try_from(v).map_err(|_| Error::Unsupported(format!("{what} {v} does not fit in 16 bits")))
}

fn read_array<const N: usize>(r: &mut impl Read) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf)?;
    Ok(buf)
}

fn read_magic(r: &mut impl Read, expected: &[u8; 4]) -> Result<()> {
    let magic: [u8; 4] = read_array(r).map_err(|_| Error::MalformedHeader("file too short for magic".into()))?;
    if &magic != expected {
        return Err(Error::Unsupported(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(&magic),
            String::from_utf8_lossy(expected)
        )));
    }
    Ok(())
}

fn truncated(what: &str) -> impl FnOnce(Error) -> Error + '_ {
    move |_| Error::MalformedHeader(format!("truncated {what}"))
}

pub fn read_events(path: impl AsRef<Path>) -> Result<EventStream> {
    let path = path.as_ref();
    let reader = BufReader::new(File::open(path)?);
    if has_extension(path, "csv") {
        read_events_csv(reader)
    } else {
        read_events_evt1(reader)
    }
}

pub fn write_events(stream: &EventStream, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = BufWriter::new(File::create(path)?);
    if has_extension(path, "csv") {
        write_events_csv(stream, &mut w)?;
    } else {
        write_events_evt1(stream, &mut w)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_events_evt1(mut r: impl Read) -> Result<EventStream> {
    read_magic(&mut r, EVT1_MAGIC)?;
    let width = u16::from_le_bytes(read_array(&mut r).map_err(truncated("header"))?);
    let height = u16::from_le_bytes(read_array(&mut r).map_err(truncated("header"))?);
    let t_start = u64::from_le_bytes(read_array(&mut r).map_err(truncated("header"))?);
    let t_end = u64::from_le_bytes(read_array(&mut r).map_err(truncated("header"))?);
    let count = u64::from_le_bytes(read_array(&mut r).map_err(truncated("header"))?);
    if width == 0 || height == 0 {
        return Err(Error::MalformedHeader(format!("empty grid {width}x{height}")));
    }
    if t_start > t_end {
        return Err(Error::MalformedHeader(format!(
            "window start {t_start} after end {t_end}"
        )));
    }

    // grow as records arrive rather than trusting `count` for the allocation
    let mut events = Vec::with_capacity(count.min(1 << 20) as usize);
    for _ in 0..count {
        let rec: [u8; EVT1_RECORD_LEN] = read_array(&mut r).map_err(truncated("event record"))?;
        let t = u64::from_le_bytes(rec[0..8].try_into().unwrap());
        let x = u16::from_le_bytes(rec[8..10].try_into().unwrap());
        let y = u16::from_le_bytes(rec[10..12].try_into().unwrap());
        let p = match rec[12] {
            0 => Polarity::Negative,
            1 => Polarity::Positive,
            other => return Err(Error::InvalidPolarity(other as i64)),
        };
        events.push(Event { t, x, y, p });
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(Error::MalformedHeader(format!("trailing bytes after {count} records")));
    }
    EventStream::from_canonical(width, height, t_start, t_end, events)
}

pub fn write_events_evt1(stream: &EventStream, w: &mut impl Write) -> Result<()> {
    w.write_all(EVT1_MAGIC)?;
    w.write_all(&stream.width().to_le_bytes())?;
    w.write_all(&stream.height().to_le_bytes())?;
    w.write_all(&stream.t_start().to_le_bytes())?;
    w.write_all(&stream.t_end().to_le_bytes())?;
    w.write_all(&(stream.len() as u64).to_le_bytes())?;
    for e in stream.events() {
        let mut rec = [0u8; EVT1_RECORD_LEN];
        rec[0..8].copy_from_slice(&e.t.to_le_bytes());
        rec[8..10].copy_from_slice(&e.x.to_le_bytes());
        rec[10..12].copy_from_slice(&e.y.to_le_bytes());
        rec[12] = match e.p {
            Polarity::Negative => 0,
            Polarity::Positive => 1,
        };
        w.write_all(&rec)?;
    }
    Ok(())
}

fn parse_field<T: std::str::FromStr>(s: &str, what: &str) -> Result<T> {
    s.trim()
        .parse()
        .map_err(|_| Error::MalformedHeader(format!("cannot parse {what} from {s:?}")))
}

pub fn read_events_csv(mut r: impl BufRead) -> Result<EventStream> {
    let mut first = String::new();
    r.read_line(&mut first)?;
    let fields: Vec<&str> = first.split_whitespace().collect();
    if fields.len() != 6 || fields[0] != "#" || fields[1] != "window" {
        return Err(Error::MalformedHeader(format!(
            "expected '# window t_start t_end width height', got {:?}",
            first.trim_end()
        )));
    }
    let t_start: u64 = parse_field(fields[2], "t_start")?;
    let t_end: u64 = parse_field(fields[3], "t_end")?;
    let width: u16 = parse_field(fields[4], "width")?;
    let height: u16 = parse_field(fields[5], "height")?;

    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(r);
    let headers = rdr.headers().map_err(|e| Error::MalformedHeader(e.to_string()))?;
    if headers.iter().collect::<Vec<_>>() != ["t", "x", "y", "p"] {
        return Err(Error::MalformedHeader(format!(
            "expected columns t,x,y,p, got {headers:?}"
        )));
    }
    let mut events = Vec::new();
    for (index, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| Error::MalformedHeader(format!("row {index}: {e}")))?;
        let t: u64 = parse_field(&rec[0], "t")?;
        let x: u32 = parse_field(&rec[1], "x")?;
        let y: u32 = parse_field(&rec[2], "y")?;
        let p: i64 = parse_field(&rec[3], "p")?;
        if x >= width as u32 || y >= height as u32 {
            return Err(Error::OutOfBounds {
                index,
                x,
                y,
                width,
                height,
            });
        }
        events.push(Event::new(t, x as u16, y as u16, Polarity::from_sign(p)?));
    }
    EventStream::from_canonical(width, height, t_start, t_end, events)
}

pub fn write_events_csv(stream: &EventStream, w: &mut impl Write) -> Result<()> {
    writeln!(
        w,
        "# window {} {} {} {}",
        stream.t_start(),
        stream.t_end(),
        stream.width(),
        stream.height()
    )?;
    writeln!(w, "t,x,y,p")?;
    for e in stream.events() {
        writeln!(w, "{},{},{},{}", e.t, e.x, e.y, e.p.sign())?;
    }
    Ok(())
}

pub fn read_image(path: impl AsRef<Path>) -> Result<IntensityImage> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    File::open(path)?.read_to_end(&mut bytes)?;
    if has_extension(path, "pfg") {
        let (width, height, values) = decode_pfg(&bytes)?;
        IntensityImage::new(width, height, values.into_iter().map(f64::from).collect())
    } else {
        decode_pgm(&bytes)
    }
}

pub fn write_image(image: &IntensityImage, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = if has_extension(path, "pfg") {
        encode_pfg(image.width(), image.height(), image.pixels())?
    } else {
        encode_pgm(image)?
    };
    std::fs::write(path, bytes)?;
    Ok(())
}

pub fn read_thresholds(path: impl AsRef<Path>) -> Result<ThresholdMap> {
    let bytes = std::fs::read(path)?;
    let (width, height, values) = decode_pfg(&bytes)?;
    ThresholdMap::new(width, height, values.into_iter().map(f64::from).collect())
}

pub fn write_thresholds(map: &ThresholdMap, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, encode_pfg(map.width(), map.height(), map.values())?)?;
    Ok(())
}

/// PGM quantization: `round(v * 255)`, halves away from zero.
pub fn quantize_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn encode_pgm(image: &IntensityImage) -> Result<Vec<u8>> {
    to_u16(image.width(), "width")?;
    to_u16(image.height(), "height")?;
    let mut out = format!("P5\n{} {}\n255\n", image.width(), image.height()).into_bytes();
    out.extend(image.pixels().iter().map(|&v| quantize_u8(v)));
    Ok(out)
}

pub fn decode_pgm(bytes: &[u8]) -> Result<IntensityImage> {
    if bytes.len() < 2 || &bytes[..2] != b"P5" {
        let magic = String::from_utf8_lossy(&bytes[..bytes.len().min(2)]).into_owned();
        return Err(Error::Unsupported(format!("image magic {magic:?}, expected P5")));
    }
    let mut pos = 2;
    let mut header = [0usize; 3];
    for field in header.iter_mut() {
        // whitespace and comments
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(Error::MalformedHeader("expected a number in PGM header".into()));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .unwrap()
            .parse()
            .map_err(|_| Error::MalformedHeader("PGM header number overflow".into()))?;
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(Error::MalformedHeader("missing whitespace after PGM maxval".into()));
    }
    pos += 1;
    let [width, height, maxval] = header;
    if maxval == 0 || maxval > 255 {
        return Err(Error::Unsupported(format!(
            "PGM maxval {maxval}, only 8-bit images are supported"
        )));
    }
    let data = &bytes[pos..];
    if data.len() != width * height {
        return Err(Error::dims(format!(
            "PGM declares {width}x{height} = {} pixels but carries {} bytes",
            width * height,
            data.len()
        )));
    }
    let scale = maxval as f64;
    let pixels = data.iter().map(|&v| (v as f64 / scale).min(1.0)).collect();
    IntensityImage::new(width, height, pixels)
}

pub fn encode_pfg(width: usize, height: usize, values: &[f64]) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(8 + values.len() * 4);
    out.extend_from_slice(PFG1_MAGIC);
    out.extend_from_slice(&to_u16(width, "width")?.to_le_bytes());
    out.extend_from_slice(&to_u16(height, "height")?.to_le_bytes());
    for &v in values {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    Ok(out)
}

pub fn decode_pfg(bytes: &[u8]) -> Result<(usize, usize, Vec<f32>)> {
    let mut r = bytes;
    read_magic(&mut r, PFG1_MAGIC)?;
    let width = u16::from_le_bytes(read_array(&mut r).map_err(truncated("header"))?) as usize;
    let height = u16::from_le_bytes(read_array(&mut r).map_err(truncated("header"))?) as usize;
    if r.len() != width * height * 4 {
        return Err(Error::dims(format!(
            "PFG1 declares {width}x{height} but carries {} payload bytes",
            r.len()
        )));
    }
    let values = r
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((width, height, values))
}

pub fn read_voxels(path: impl AsRef<Path>) -> Result<VoxelGrid> {
    decode_vox(&std::fs::read(path)?)
}

pub fn write_voxels(grid: &VoxelGrid, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, encode_vox(grid)?)?;
    Ok(())
}

pub fn encode_vox(grid: &VoxelGrid) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(12 + grid.values().len() * 4);
    out.extend_from_slice(VOX1_MAGIC);
    out.extend_from_slice(&to_u16(grid.width(), "width")?.to_le_bytes());
    out.extend_from_slice(&to_u16(grid.height(), "height")?.to_le_bytes());
    out.extend_from_slice(&to_u16(grid.channels(), "channels")?.to_le_bytes());
    out.extend_from_slice(&0u16.to_le_bytes());
    for &v in grid.values() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    Ok(out)
}

pub fn decode_vox(bytes: &[u8]) -> Result<VoxelGrid> {
    let mut r = bytes;
    read_magic(&mut r, VOX1_MAGIC)?;
    let width = u16::from_le_bytes(read_array(&mut r).map_err(truncated("header"))?) as usize;
    let height = u16::from_le_bytes(read_array(&mut r).map_err(truncated("header"))?) as usize;
    let channels = u16::from_le_bytes(read_array(&mut r).map_err(truncated("header"))?) as usize;
    let _pad: [u8; 2] = read_array(&mut r).map_err(truncated("header"))?;
    if r.len() != width * height * channels * 4 {
        return Err(Error::dims(format!(
            "VOX1 declares {width}x{height}x{channels} but carries {} payload bytes",
            r.len()
        )));
    }
    let values = r
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    VoxelGrid::new(width, height, channels, values)
}
