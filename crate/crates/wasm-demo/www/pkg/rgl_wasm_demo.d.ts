/* tslint:disable */
/* eslint-disable */

/**
 * A generated graph before pruning plus the settings that made it.
 */
export class Scene {
    free(): void;
    [Symbol.dispose](): void;
    constructor(seed: bigint, min_nodes: number, max_nodes: number);
    /**
     * Graph JSON after merging degree-2 nodes straighter than `angle_deg`.
     */
    pruned(angle_deg: number): string;
    /**
     * Grayscale bytes (row-major, x fastest) of the pruned graph.
     */
    render(angle_deg: number, noise: number, thickness: number): Uint8Array;
    readonly image_size: number;
}

/**
 * `[smd, precision, recall, f1]` of `pred` against `gt`.
 */
export function compare(pred_json: string, gt_json: string, n_points: number, node_tol: number): Float64Array;

/**
 * Moves every node by uniform noise of amplitude `sigma`, clamped to the
 * unit square, and drops each edge with probability `drop`.
 */
export function perturb(graph_json: string, sigma: number, drop: number, seed: bigint): string;

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly __wbg_scene_free: (a: number, b: number) => void;
    readonly compare: (a: number, b: number, c: number, d: number, e: number, f: number) => [number, number, number, number];
    readonly perturb: (a: number, b: number, c: number, d: number, e: bigint) => [number, number, number, number];
    readonly scene_image_size: (a: number) => number;
    readonly scene_new: (a: bigint, b: number, c: number) => [number, number, number];
    readonly scene_pruned: (a: number, b: number) => [number, number, number, number];
    readonly scene_render: (a: number, b: number, c: number, d: number) => [number, number, number, number];
    readonly __wbindgen_externrefs: WebAssembly.Table;
    readonly __wbindgen_malloc: (a: number, b: number) => number;
    readonly __wbindgen_realloc: (a: number, b: number, c: number, d: number) => number;
    readonly __externref_table_dealloc: (a: number) => void;
    readonly __wbindgen_free: (a: number, b: number, c: number) => void;
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
