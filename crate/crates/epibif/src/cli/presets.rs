//! The fifteen scenario presets.
