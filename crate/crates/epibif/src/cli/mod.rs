//! Command-line front end: configuration, scenario presets, stable file
//! formats (CSV/JSON), and SVG rendering.

pub mod presets;
