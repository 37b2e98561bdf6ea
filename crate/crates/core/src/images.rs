//! Image locators, inline attachment encoding, and the 1×1 placeholder
//! images used by the offline judge.

use std::io::Cursor;
use std::path::PathBuf;

use base64::Engine;
use base64::engine::general_purpose::STANDARD;
use thiserror::Error;

use crate::record::ImageRef;

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("image `{id}` is not resolvable: {uri}")]
    Unresolvable { id: String, uri: String },
    #[error("image `{id}` could not be read: {source}")]
    Read {
        id: String,
        #[source]
        source: std::io::Error,
    },
    #[error("image `{id}` does not decode as a raster image: {reason}")]
    Undecodable { id: String, reason: String },
    #[error("malformed data URL")]
    DataUrl,
    #[error("png: {0}")]
    Png(String),
}

/// Where an image lives once its uri has been interpreted.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ImageSource {
    Local(PathBuf),
    Remote(String),
}

pub fn source_of(image: &ImageRef) -> ImageSource {
    let uri = image.uri.trim();
    if uri.starts_with("http://") || uri.starts_with("https://") || uri.starts_with("data:") {
        ImageSource::Remote(uri.to_string())
    } else {
        ImageSource::Local(PathBuf::from(uri.strip_prefix("file://").unwrap_or(uri)))
    }
}

/// Local files must exist; remote URLs are accepted as-is.
pub fn check_resolvable(image: &ImageRef) -> Result<(), ImageError> {
    match source_of(image) {
        ImageSource::Local(p) if p.is_file() => Ok(()),
        ImageSource::Local(_) => Err(ImageError::Unresolvable {
            id: image.id.clone(),
            uri: image.uri.clone(),
        }),
        ImageSource::Remote(_) => Ok(()),
    }
}

fn mime_for(bytes: &[u8], id: &str) -> Result<&'static str, ImageError> {
    let format = image::guess_format(bytes).map_err(|e| ImageError::Undecodable {
        id: id.to_string(),
        reason: e.to_string(),
    })?;
    image::ImageReader::with_format(Cursor::new(bytes), format)
        .into_dimensions()
        .map_err(|e| ImageError::Undecodable {
            id: id.to_string(),
            reason: e.to_string(),
        })?;
    Ok(format.to_mime_type())
}

/// Inline attachment payload: a `data:` URL for local files, the URL itself
/// for remote images. Deterministic for a given file.
pub fn encode_image(image: &ImageRef) -> Result<String, ImageError> {
    match source_of(image) {
        ImageSource::Remote(url) => Ok(url),
        ImageSource::Local(path) => {
            let bytes = std::fs::read(&path).map_err(|source| {
                if source.kind() == std::io::ErrorKind::NotFound {
                    ImageError::Unresolvable { id: image.id.clone(), uri: image.uri.clone() }
                } else {
                    ImageError::Read { id: image.id.clone(), source }
                }
            })?;
            encode_bytes(&bytes, &image.id)
        }
    }
}

pub fn encode_bytes(bytes: &[u8], id: &str) -> Result<String, ImageError> {
    let mime = mime_for(bytes, id)?;
    Ok(format!("data:{mime};base64,{}", STANDARD.encode(bytes)))
}

/// Inverse of [`encode_bytes`].
pub fn decode_data_url(url: &str) -> Result<Vec<u8>, ImageError> {
    let rest = url.strip_prefix("data:").ok_or(ImageError::DataUrl)?;
    let (_, b64) = rest.split_once(";base64,").ok_or(ImageError::DataUrl)?;
    STANDARD.decode(b64.trim()).map_err(|_| ImageError::DataUrl)
}

const PLACEHOLDER_PIXEL: [u8; 3] = [255, 255, 255];

fn write_png(text: Option<(&str, &str)>) -> Result<Vec<u8>, ImageError> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, 1, 1);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        if let Some((k, v)) = text {
            enc.add_itxt_chunk(k.to_string(), v.to_string())
                .map_err(|e| ImageError::Png(e.to_string()))?;
        }
        let mut w = enc.write_header().map_err(|e| ImageError::Png(e.to_string()))?;
        w.write_image_data(&PLACEHOLDER_PIXEL)
            .map_err(|e| ImageError::Png(e.to_string()))?;
        w.finish().map_err(|e| ImageError::Png(e.to_string()))?;
    }
    Ok(out)
}

/// A fixed 1×1 white PNG.
pub fn placeholder_png() -> Vec<u8> {
    write_png(None).expect("in-memory png encoding")
}

/// The 1×1 placeholder carrying a UTF-8 metadata chunk. Pixels are identical
/// to [`placeholder_png`].
pub fn placeholder_png_with_text(key: &str, value: &str) -> Result<Vec<u8>, ImageError> {
    write_png(Some((key, value)))
}

/// Reads a UTF-8 metadata chunk from a PNG, if present.
pub fn png_text(bytes: &[u8], key: &str) -> Result<Option<String>, ImageError> {
    let reader = png::Decoder::new(Cursor::new(bytes))
        .read_info()
        .map_err(|e| ImageError::Png(e.to_string()))?;
    for chunk in &reader.info().utf8_text {
        if chunk.keyword == key {
            return chunk
                .get_text()
                .map(Some)
                .map_err(|e| ImageError::Png(e.to_string()));
        }
    }
    Ok(None)
}
