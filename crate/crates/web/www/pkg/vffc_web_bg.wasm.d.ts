/* tslint:disable */
/* eslint-disable */
export const memory: WebAssembly.Memory;
export const __wbg_demo_free: (a: number, b: number) => void;
export const demo_band_end: (a: number) => number;
export const demo_band_start: (a: number) => number;
export const demo_depth: (a: number) => number;
export const demo_energy_range: (a: number) => [number, number];
export const demo_energy_rgba: (a: number) => [number, number];
export const demo_mask_rgba: (a: number) => [number, number];
export const demo_matched_threshold: (a: number) => number;
export const demo_new: (a: number, b: number, c: number) => [number, number, number];
export const demo_overlay_rgba: (a: number, b: number) => [number, number];
export const demo_prevalence: (a: number) => number;
export const demo_score: (a: number, b: number) => [number, number, number, number];
export const demo_size: (a: number) => number;
export const demo_slice_rgba: (a: number, b: number) => [number, number];
export const demo_spectrum_rgba: (a: number, b: number) => [number, number, number, number];
export const __wbindgen_externrefs: WebAssembly.Table;
export const __wbindgen_free: (a: number, b: number, c: number) => void;
export const __externref_table_dealloc: (a: number) => void;
export const __wbindgen_start: () => void;
