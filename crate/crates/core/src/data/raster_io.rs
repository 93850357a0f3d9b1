//! GeoTIFF and PNG raster reading/writing.
//!
//! Rasters are held band-major (`bands × rows × cols`) as `f32`. Georeferencing
//! tags (pixel scale, tie point, geo-key directory) are carried through
//! unchanged so edited or synthesized tiles stay aligned with their inputs.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use ndarray::{Array2, Array3};
use tiff::decoder::{Decoder, DecodingResult, Limits};
use tiff::encoder::colortype::{self, ColorType};
use tiff::encoder::TiffEncoder;
use tiff::tags::{PhotometricInterpretation, SampleFormat, Tag};

use crate::error::{Error, Result};

const TAG_MODEL_PIXEL_SCALE: u16 = 33550;
const TAG_MODEL_TIEPOINT: u16 = 33922;
const TAG_GEO_KEY_DIRECTORY: u16 = 34735;
const TAG_GEO_DOUBLE_PARAMS: u16 = 34736;
const TAG_GEO_ASCII_PARAMS: u16 = 34737;
const TAG_PLANAR_CONFIGURATION: u16 = 284;

/// GeoTIFF georeferencing tags, copied verbatim between files.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GeoTags {
    pub pixel_scale: Option<Vec<f64>>,
    pub tiepoint: Option<Vec<f64>>,
    pub key_directory: Option<Vec<u16>>,
    pub double_params: Option<Vec<f64>>,
    pub ascii_params: Option<String>,
}

impl GeoTags {
    /// Ground sampling distance along x, when a pixel scale is present.
    pub fn pixel_size(&self) -> Option<f64> {
        self.pixel_scale.as_ref().and_then(|s| s.first().copied())
    }

    pub fn with_pixel_size(pixel_size: f64) -> Self {
        GeoTags {
            pixel_scale: Some(vec![pixel_size, pixel_size, 0.0]),
            ..Default::default()
        }
    }
}

/// A decoded multi-band raster.
#[derive(Debug, Clone)]
pub struct Raster {
    pub data: Array3<f32>,
    pub geo: GeoTags,
}

impl Raster {
    pub fn bands(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn rows(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn cols(&self) -> usize {
        self.data.shape()[2]
    }

    pub fn band(&self, b: usize) -> Array2<f32> {
        self.data.index_axis(ndarray::Axis(0), b).to_owned()
    }
}

fn to_f32(result: DecodingResult) -> Vec<f32> {
    match result {
        DecodingResult::U8(v) => v.into_iter().map(f32::from).collect(),
        DecodingResult::U16(v) => v.into_iter().map(f32::from).collect(),
        DecodingResult::U32(v) => v.into_iter().map(|x| x as f32).collect(),
        DecodingResult::U64(v) => v.into_iter().map(|x| x as f32).collect(),
        DecodingResult::F16(v) => v.into_iter().map(f32::from).collect(),
        DecodingResult::F32(v) => v,
        DecodingResult::F64(v) => v.into_iter().map(|x| x as f32).collect(),
        DecodingResult::I8(v) => v.into_iter().map(f32::from).collect(),
        DecodingResult::I16(v) => v.into_iter().map(f32::from).collect(),
        DecodingResult::I32(v) => v.into_iter().map(|x| x as f32).collect(),
        DecodingResult::I64(v) => v.into_iter().map(|x| x as f32).collect(),
    }
}

/// Reads every band of a (Geo)TIFF into a band-major `f32` array.
pub fn read_tiff(path: &Path) -> Result<Raster> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut decoder = Decoder::new(std::io::BufReader::new(file))
        .map_err(|e| Error::raster(path, e.to_string()))?
        .with_limits(Limits::unlimited());
    let (width, height) = decoder
        .dimensions()
        .map_err(|e| Error::raster(path, e.to_string()))?;
    let bands = decoder
        .colortype()
        .map_err(|e| Error::raster(path, e.to_string()))?
        .num_samples() as usize;
    let planar = decoder
        .find_tag_unsigned::<u16>(Tag::Unknown(TAG_PLANAR_CONFIGURATION))
        .ok()
        .flatten()
        .unwrap_or(1)
        == 2;

    let geo = GeoTags {
        pixel_scale: decoder
            .get_tag_f64_vec(Tag::Unknown(TAG_MODEL_PIXEL_SCALE))
            .ok(),
        tiepoint: decoder.get_tag_f64_vec(Tag::Unknown(TAG_MODEL_TIEPOINT)).ok(),
        key_directory: decoder
            .get_tag_u16_vec(Tag::Unknown(TAG_GEO_KEY_DIRECTORY))
            .ok(),
        double_params: decoder
            .get_tag_f64_vec(Tag::Unknown(TAG_GEO_DOUBLE_PARAMS))
            .ok(),
        ascii_params: decoder
            .get_tag_ascii_string(Tag::Unknown(TAG_GEO_ASCII_PARAMS))
            .ok(),
    };

    let raw = to_f32(
        decoder
            .read_image()
            .map_err(|e| Error::raster(path, e.to_string()))?,
    );
    let (rows, cols) = (height as usize, width as usize);
    if raw.len() != rows * cols * bands {
        return Err(Error::raster(
            path,
            format!(
                "expected {} samples ({bands} bands of {rows}x{cols}), decoded {}",
                rows * cols * bands,
                raw.len()
            ),
        ));
    }
    let data = if planar || bands == 1 {
        Array3::from_shape_vec((bands, rows, cols), raw)
    } else {
        Array3::from_shape_vec((rows, cols, bands), raw)
            .map(|a| a.permuted_axes([2, 0, 1]).as_standard_layout().to_owned())
    }
    .map_err(|e| Error::raster(path, e.to_string()))?;
    Ok(Raster { data, geo })
}

struct TwoBand32Float;

impl ColorType for TwoBand32Float {
    type Inner = f32;
    const TIFF_VALUE: PhotometricInterpretation = PhotometricInterpretation::BlackIsZero;
    const BITS_PER_SAMPLE: &'static [u16] = &[32, 32];
    const SAMPLE_FORMAT: &'static [SampleFormat] = &[SampleFormat::IEEEFP, SampleFormat::IEEEFP];

    fn horizontal_predict(row: &[f32], result: &mut Vec<f32>) {
        result.extend_from_slice(row);
    }
}

fn interleave<T: Copy>(data: &Array3<T>) -> Vec<T> {
    data.view()
        .permuted_axes([1, 2, 0])
        .as_standard_layout()
        .iter()
        .copied()
        .collect()
}

fn write_geo_tags<W, C, K>(
    image: &mut tiff::encoder::ImageEncoder<'_, W, C, K>,
    geo: &GeoTags,
) -> tiff::TiffResult<()>
where
    W: std::io::Write + std::io::Seek,
    C: ColorType,
    K: tiff::encoder::TiffKind,
{
    let enc = image.encoder();
    if let Some(v) = &geo.pixel_scale {
        enc.write_tag(Tag::Unknown(TAG_MODEL_PIXEL_SCALE), v.as_slice())?;
    }
    if let Some(v) = &geo.tiepoint {
        enc.write_tag(Tag::Unknown(TAG_MODEL_TIEPOINT), v.as_slice())?;
    }
    if let Some(v) = &geo.key_directory {
        enc.write_tag(Tag::Unknown(TAG_GEO_KEY_DIRECTORY), v.as_slice())?;
    }
    if let Some(v) = &geo.double_params {
        enc.write_tag(Tag::Unknown(TAG_GEO_DOUBLE_PARAMS), v.as_slice())?;
    }
    if let Some(v) = &geo.ascii_params {
        enc.write_tag(Tag::Unknown(TAG_GEO_ASCII_PARAMS), v.as_str())?;
    }
    Ok(())
}

/// Writes a 32-bit float GeoTIFF with 1, 2 or 3 bands.
pub fn write_tiff_f32(path: &Path, data: &Array3<f32>, geo: &GeoTags) -> Result<()> {
    let (bands, rows, cols) = data.dim();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut encoder =
        TiffEncoder::new(BufWriter::new(file)).map_err(|e| Error::raster(path, e.to_string()))?;
    let samples = interleave(data);
    let (w, h) = (cols as u32, rows as u32);
    let res = match bands {
        1 => encoder.new_image::<colortype::Gray32Float>(w, h).and_then(|mut img| {
            write_geo_tags(&mut img, geo)?;
            img.write_data(&samples)
        }),
        2 => encoder.new_image::<TwoBand32Float>(w, h).and_then(|mut img| {
            write_geo_tags(&mut img, geo)?;
            img.write_data(&samples)
        }),
        3 => encoder.new_image::<colortype::RGB32Float>(w, h).and_then(|mut img| {
            write_geo_tags(&mut img, geo)?;
            img.write_data(&samples)
        }),
        n => {
            return Err(Error::raster(
                path,
                format!("unsupported band count {n} for float output"),
            ))
        }
    };
    res.map_err(|e| Error::raster(path, e.to_string()))
}

/// Writes an 8-bit single-band or RGB GeoTIFF (label maps, RGB exports).
pub fn write_tiff_u8(path: &Path, data: &Array3<u8>, geo: &GeoTags) -> Result<()> {
    let (bands, rows, cols) = data.dim();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut encoder =
        TiffEncoder::new(BufWriter::new(file)).map_err(|e| Error::raster(path, e.to_string()))?;
    let samples = interleave(data);
    let (w, h) = (cols as u32, rows as u32);
    let res = match bands {
        1 => encoder.new_image::<colortype::Gray8>(w, h).and_then(|mut img| {
            write_geo_tags(&mut img, geo)?;
            img.write_data(&samples)
        }),
        3 => encoder.new_image::<colortype::RGB8>(w, h).and_then(|mut img| {
            write_geo_tags(&mut img, geo)?;
            img.write_data(&samples)
        }),
        n => {
            return Err(Error::raster(
                path,
                format!("unsupported band count {n} for 8-bit output"),
            ))
        }
    };
    res.map_err(|e| Error::raster(path, e.to_string()))
}

/// Reads an 8-bit grayscale or RGB PNG as a band-major raster.
pub fn read_png(path: &Path) -> Result<Raster> {
    let img = image::open(path).map_err(|e| Error::raster(path, e.to_string()))?;
    let rgb = img.to_rgb8();
    let (w, h) = rgb.dimensions();
    let hwc = Array3::from_shape_vec(
        (h as usize, w as usize, 3),
        rgb.into_raw().into_iter().map(f32::from).collect(),
    )
    .map_err(|e| Error::raster(path, e.to_string()))?;
    Ok(Raster {
        data: hwc.permuted_axes([2, 0, 1]).as_standard_layout().to_owned(),
        geo: GeoTags::default(),
    })
}

/// Writes an 8-bit grayscale (1 band) or RGB (3 band) PNG preview.
pub fn write_png(path: &Path, data: &Array3<u8>) -> Result<()> {
    let (bands, rows, cols) = data.dim();
    let samples = interleave(data);
    let color = match bands {
        1 => image::ExtendedColorType::L8,
        3 => image::ExtendedColorType::Rgb8,
        n => {
            return Err(Error::raster(
                path,
                format!("unsupported band count {n} for png"),
            ))
        }
    };
    image::save_buffer(path, &samples, cols as u32, rows as u32, color)
        .map_err(|e| Error::raster(path, e.to_string()))
}

/// Dispatches on file extension; `.jp2` is recognized but not decodable.
pub fn read_raster(path: &Path) -> Result<Raster> {
    match path
        .extension()
        .and_then(|e| e.to_str())
        .map(|e| e.to_ascii_lowercase())
        .as_deref()
    {
        Some("tif") | Some("tiff") => read_tiff(path),
        Some("png") => read_png(path),
        Some("jp2") => Err(Error::raster(
            path,
            "JPEG 2000 decoding is not supported; convert the aerial photographs to GeoTIFF \
             (e.g. `gdal_translate x_rgb.jp2 x_rgb.tif`)",
        )),
        _ => Err(Error::raster(path, "unrecognized raster extension")),
    }
}
