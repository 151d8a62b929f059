export * from './api.js';
export * from './brush.js';
export * from './layerPanel.js';
export * from './markers.js';
export * from './overlay.js';
export * from './sessionView.js';
export * from './types.js';
export * from './windowing.js';
