/* tslint:disable */
/* eslint-disable */

/**
 * `[capacity, min_samples, conditional_entropy, fano]` for one query, in bits.
 */
export function bounds(h_y: number, epsilon: number, snr: number, m: number, vocab: number, vocab_minus_one: boolean): Float64Array;

/**
 * Mean distance travelled by Gaussian random walks: `[exponent, m_1, …, m_steps]`
 * (exponent is NaN when it cannot be fitted).
 */
export function brownian_cone(dim: number, sigma: number, steps: number, trials: number, seed: bigint): Float64Array;

/**
 * Tube loss and chord decomposition of three 2-D points `[sx, sy, rx, ry, tx, ty]`.
 *
 * Returns `[loss, signal, noise, parallel_x, parallel_y, perpendicular_x, perpendicular_y]`;
 * the decomposition splits h_r − h_s along and across the chord h_t − h_s.
 */
export function tube_triple(points: Float64Array): Float64Array;

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly bounds: (a: number, b: number, c: number, d: number, e: number, f: number) => [number, number, number, number];
    readonly brownian_cone: (a: number, b: number, c: number, d: number, e: bigint) => [number, number, number, number];
    readonly tube_triple: (a: number, b: number) => [number, number, number, number];
    readonly __wbindgen_externrefs: WebAssembly.Table;
    readonly __externref_table_dealloc: (a: number) => void;
    readonly __wbindgen_free: (a: number, b: number, c: number) => void;
    readonly __wbindgen_malloc: (a: number, b: number) => number;
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
