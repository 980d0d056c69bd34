/* tslint:disable */
/* eslint-disable */

export class Scene {
    free(): void;
    [Symbol.dispose](): void;
    /**
     * Binary cover of the last rendered heatmap.
     */
    cover(threshold: number): Float32Array;
    /**
     * Decoded points as `[col, row, ...]`.
     */
    decode(threshold: number, min_distance: number): Float64Array;
    height(): number;
    /**
     * `size` pixels square at 1 m, with `n_trees` planted crowns.
     */
    constructor(seed: number, size: number, n_trees: number);
    /**
     * Renders the target heatmap. Wider crowns get more uncertainty,
     * scaled by `gain`.
     */
    render(sigma: number, gain: number): Float32Array;
    /**
     * `[precision, recall, f1]` of the decoded points against the planted
     * centers.
     */
    score(threshold: number, min_distance: number, max_dist: number): Float64Array;
    /**
     * Planted centers as `[col, row, ...]` in fractional pixels.
     */
    truth(): Float64Array;
    width(): number;
}

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly __wbg_scene_free: (a: number, b: number) => void;
    readonly scene_cover: (a: number, b: number) => [number, number];
    readonly scene_decode: (a: number, b: number, c: number) => [number, number, number, number];
    readonly scene_height: (a: number) => number;
    readonly scene_new: (a: number, b: number, c: number) => [number, number, number];
    readonly scene_render: (a: number, b: number, c: number) => [number, number, number, number];
    readonly scene_score: (a: number, b: number, c: number, d: number) => [number, number, number, number];
    readonly scene_truth: (a: number) => [number, number];
    readonly scene_width: (a: number) => number;
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
