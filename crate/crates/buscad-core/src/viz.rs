//! Overlay rendering (placeholder).
