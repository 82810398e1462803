/* tslint:disable */
/* eslint-disable */

/**
 * Result of fitting a model to a scene.
 */
export class Fit {
    private constructor();
    free(): void;
    [Symbol.dispose](): void;
    /**
     * Percentage of points labeled correctly.
     */
    accuracy(): number;
    /**
     * Predicted ambiguity of every input point.
     */
    ambiguity(): Float64Array;
    labels(): Uint32Array;
    /**
     * Total loss per epoch.
     */
    losses(): Float64Array;
}

/**
 * A labeled synthetic cloud held on the Rust side.
 */
export class Scene {
    free(): void;
    [Symbol.dispose](): void;
    /**
     * Ground-truth ambiguity of every point at neighborhood size `k`.
     */
    ambiguity(k: number, beta: number): Float64Array;
    classes(): number;
    /**
     * Trains a small model on this scene and labels it.
     */
    fit(epochs: number, seed: number): Fit;
    is_empty(): boolean;
    labels(): Uint32Array;
    len(): number;
    /**
     * `kind` is one of `two-rooms`, `planar-boundary`, `checker-columns`.
     */
    constructor(kind: string, points_per_class: number, noise: number, seed: number);
    /**
     * Flat `x, y, z` triples.
     */
    positions(): Float64Array;
}

/**
 * Contrastive margin `mu * a + nu` for an ambiguity `a`.
 */
export function marginFor(a: number, mu: number, nu: number): number;

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly __wbg_fit_free: (a: number, b: number) => void;
    readonly __wbg_scene_free: (a: number, b: number) => void;
    readonly fit_accuracy: (a: number) => number;
    readonly fit_ambiguity: (a: number) => [number, number];
    readonly fit_labels: (a: number) => [number, number];
    readonly fit_losses: (a: number) => [number, number];
    readonly marginFor: (a: number, b: number, c: number) => number;
    readonly scene_ambiguity: (a: number, b: number, c: number) => [number, number, number, number];
    readonly scene_classes: (a: number) => number;
    readonly scene_fit: (a: number, b: number, c: number) => [number, number, number];
    readonly scene_is_empty: (a: number) => number;
    readonly scene_labels: (a: number) => [number, number];
    readonly scene_len: (a: number) => number;
    readonly scene_new: (a: number, b: number, c: number, d: number, e: number) => [number, number, number];
    readonly scene_positions: (a: number) => [number, number];
    readonly __wbindgen_externrefs: WebAssembly.Table;
    readonly __wbindgen_free: (a: number, b: number, c: number) => void;
    readonly __externref_table_dealloc: (a: number) => void;
    readonly __wbindgen_malloc: (a: number, b: number) => number;
    readonly __wbindgen_realloc: (a: number, b: number, c: number, d: number) => number;
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
