/* tslint:disable */
/* eslint-disable */

export class Demo {
    free(): void;
    [Symbol.dispose](): void;
    band_end(): number;
    band_start(): number;
    depth(): number;
    energy_range(): Float64Array;
    energy_rgba(): Uint8Array;
    mask_rgba(): Uint8Array;
    /**
     * Energy level that marks as many pixels as the mask has ink.
     */
    matched_threshold(): number;
    /**
     * A `24 x size x size` fragment; `delta` is the ink texture contrast.
     */
    constructor(seed: number, size: number, delta: number);
    /**
     * True positives green, false positives red, misses blue.
     */
    overlay_rgba(threshold: number): Uint8Array;
    prevalence(): number;
    /**
     * `[f_beta, pfm, psnr, predicted fraction]` for ink = energy <= threshold.
     */
    score(threshold: number): Float64Array;
    size(): number;
    slice_rgba(z: number): Uint8Array;
    /**
     * Centred log-magnitude of the slice's 2D spectrum.
     */
    spectrum_rgba(z: number): Uint8Array;
}

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly __wbg_demo_free: (a: number, b: number) => void;
    readonly demo_band_end: (a: number) => number;
    readonly demo_band_start: (a: number) => number;
    readonly demo_depth: (a: number) => number;
    readonly demo_energy_range: (a: number) => [number, number];
    readonly demo_energy_rgba: (a: number) => [number, number];
    readonly demo_mask_rgba: (a: number) => [number, number];
    readonly demo_matched_threshold: (a: number) => number;
    readonly demo_new: (a: number, b: number, c: number) => [number, number, number];
    readonly demo_overlay_rgba: (a: number, b: number) => [number, number];
    readonly demo_prevalence: (a: number) => number;
    readonly demo_score: (a: number, b: number) => [number, number, number, number];
    readonly demo_size: (a: number) => number;
    readonly demo_slice_rgba: (a: number, b: number) => [number, number];
    readonly demo_spectrum_rgba: (a: number, b: number) => [number, number, number, number];
    readonly __wbindgen_externrefs: WebAssembly.Table;
    readonly __wbindgen_free: (a: number, b: number, c: number) => void;
    readonly __externref_table_dealloc: (a: number) => void;
    readonly __wbindgen_start: () => void;
}

export type SyncInitInput = BufferSource | WebAssembly.Module;

/**
 * Instantiates the given `module`, which can either be bytes or
 * a precompiled `WebAssembly.Module`.
 *
 * @param {{ module: SyncInitInput }} module - Passing `SyncInitInput` directly is deprecated.
 *
 * @returns {InitOutput}
 */
export function initSync(module: { module: SyncInitInput } | SyncInitInput): InitOutput;

/**
 * If `module_or_path` is {RequestInfo} or {URL}, makes a request and
 * for everything else, calls `WebAssembly.instantiate` directly.
 *
 * @param {{ module_or_path: InitInput | Promise<InitInput> }} module_or_path - Passing `InitInput` directly is deprecated.
 *
 * @returns {Promise<InitOutput>}
 */
export default function __wbg_init (module_or_path?: { module_or_path: InitInput | Promise<InitInput> } | InitInput | Promise<InitInput>): Promise<InitOutput>;
