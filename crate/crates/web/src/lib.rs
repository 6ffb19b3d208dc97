//! WebAssembly bindings for the browser demo. Every function returns RGBA
//! bytes, several images concatenated where noted.

use lesion_core::data::{seeded_rng, synth_generate, ClassLabel};
use lesion_core::dihedral::Dihedral;
use lesion_core::image::{preprocess_pair, rescale_to_unit, resize_bilinear, ImageBuffer, ScaleSizes};
use lesion_core::pipeline::FINE_RESIZE_FACTOR;
use wasm_bindgen::prelude::*;

/// Native render size of the synthetic lesions.
pub const LESION_SIZE: usize = 256;

fn lesion(class: u32, seed: u32) -> Result<ImageBuffer, String> {
    let class = ClassLabel::from_index(class as usize).ok_or_else(|| format!("class index {class} out of range"))?;
    synth_generate(class, &mut seeded_rng(u64::from(seed)), LESION_SIZE).map_err(|e| e.to_string())
}

fn push_rgba(out: &mut Vec<u8>, img: &ImageBuffer) {
    for px in img.pixels().chunks_exact(3) {
        out.extend_from_slice(px);
        out.push(255);
    }
}

pub fn render_lesion(class: u32, seed: u32) -> Result<Vec<u8>, String> {
    let mut out = Vec::with_capacity(LESION_SIZE * LESION_SIZE * 4);
    push_rgba(&mut out, &lesion(class, seed)?);
    Ok(out)
}

/// The coarse view (`side` px resize) followed by the fine view (resize to
/// twice `side`, centre crop `side`), as the model sees them.
pub fn render_scale_views(class: u32, seed: u32, side: u32) -> Result<Vec<u8>, String> {
    let side = side as usize;
    let sizes = ScaleSizes {
        coarse: side,
        fine_resize: FINE_RESIZE_FACTOR * side,
        crop: side,
    };
    let (coarse, fine) = preprocess_pair(&lesion(class, seed)?, sizes).map_err(|e| e.to_string())?;
    let mut out = Vec::with_capacity(2 * side * side * 4);
    push_rgba(&mut out, &coarse.to_buffer());
    push_rgba(&mut out, &fine.to_buffer());
    Ok(out)
}

/// All eight dihedral images of a `side` px rendering, in canonical order.
pub fn render_dihedral_orbit(class: u32, seed: u32, side: u32) -> Result<Vec<u8>, String> {
    let side = side as usize;
    let small = resize_bilinear(&rescale_to_unit(&lesion(class, seed)?), side, side).map_err(|e| e.to_string())?;
    let mut out = Vec::with_capacity(8 * side * side * 4);
    for g in Dihedral::ALL {
        push_rgba(&mut out, &g.apply(&small).map_err(|e| e.to_string())?.to_buffer());
    }
    Ok(out)
}

pub fn orbit_names() -> Vec<&'static str> {
    Dihedral::ALL.iter().map(|g| g.name()).collect()
}

#[wasm_bindgen(js_name = lesionSize)]
pub fn lesion_size() -> u32 {
    LESION_SIZE as u32
}

#[wasm_bindgen(js_name = renderLesion)]
pub fn js_render_lesion(class: u32, seed: u32) -> Result<Vec<u8>, JsError> {
    render_lesion(class, seed).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = renderScaleViews)]
pub fn js_render_scale_views(class: u32, seed: u32, side: u32) -> Result<Vec<u8>, JsError> {
    render_scale_views(class, seed, side).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = renderDihedralOrbit)]
pub fn js_render_dihedral_orbit(class: u32, seed: u32, side: u32) -> Result<Vec<u8>, JsError> {
    render_dihedral_orbit(class, seed, side).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = orbitNames)]
pub fn js_orbit_names() -> Vec<String> {
    orbit_names().into_iter().map(String::from).collect()
}
