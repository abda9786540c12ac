// SPDX-License-Identifier: Apache-2.0

//! Experiment orchestration on top of the scoring, selection and metric layers.

pub mod diversity;
pub mod masking;
pub mod pipeline;
pub mod published;
pub mod ranking;
pub mod report;
