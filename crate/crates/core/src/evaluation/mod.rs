//! Objective evaluation (stub).
