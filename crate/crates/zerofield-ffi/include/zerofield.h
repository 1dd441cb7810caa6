/* C ABI for the zerofield magnetometry toolkit.
 *
 * Conventions:
 *  - Fallible calls return zf_status_t; ZF_OK is 0.
 *  - Results live behind opaque handles freed with the matching _free call.
 *  - Rasters are copied into caller-owned row-major buffers of exactly
 *    nx*ny elements; rejected map pixels are NaN.
 *  - zf_last_error_message() describes the most recent failure on the
 *    calling thread.
 *
 * Kept in sync by hand with crates/zerofield-ffi/src/lib.rs.
 */

#ifndef ZEROFIELD_H
#define ZEROFIELD_H

#include <stddef.h>
#include <stdint.h>

#ifdef __cplusplus
extern "C" {
#endif

typedef enum zf_status {
  ZF_OK = 0,
  ZF_NULL_POINTER = 1,
  ZF_INVALID_ARGUMENT = 2,
  ZF_IO = 3,
  ZF_RUNTIME = 4,
  ZF_PANIC = 5,
} zf_status_t;

typedef enum zf_field_component {
  ZF_COMPONENT_BX = 0,
  ZF_COMPONENT_BY = 1,
  ZF_COMPONENT_BZ = 2,
} zf_field_component_t;

typedef enum zf_map_channel {
  ZF_CHANNEL_SHIFT = 0,        /* reported field shift, tesla */
  ZF_CHANNEL_SHIFT_STDERR = 1, /* 1-sigma shift error, tesla */
  ZF_CHANNEL_CONTRAST_PCT = 2, /* fractional dip depth, percent */
  ZF_CHANNEL_FWHM = 3,         /* full width at half maximum, tesla */
  ZF_CHANNEL_Y0 = 4,           /* fitted offset, counts */
} zf_map_channel_t;

/* Opaque handles. */
typedef struct zf_field_map zf_field_map_t;
typedef struct zf_parameter_maps zf_parameter_maps_t;

/* Library version as a static NUL-terminated string. */
const char *zf_version(void);

/* Copies the calling thread's last error message into buf (truncated,
 * NUL-terminated when cap > 0). Returns the full message length excluding
 * the NUL; buf may be NULL to query the length. */
size_t zf_last_error_message(char *buf, size_t cap);

/* Simulates the cross pattern's field on an nx-by-ny raster at height
 * standoff_m. route is one of "P34", "P14", "P12", "P13", "P23", "P24";
 * current_a is the signed drive current. Pass 0 for arm_length_m,
 * wire_width_m, or n_filaments to take the defaults (4 mm, 65 um, 9
 * filaments). On ZF_OK, *out owns the map; free with zf_field_map_free. */
zf_status_t zf_simulate_cross(const char *route, double current_a,
                              double arm_length_m, double wire_width_m,
                              uint32_t n_filaments, uint32_t nx, uint32_t ny,
                              double pitch_m, double standoff_m,
                              zf_field_map_t **out);

zf_status_t zf_field_map_dims(const zf_field_map_t *map, uint32_t *nx,
                              uint32_t *ny);

/* Copies one component (tesla) into out; len must equal nx*ny. */
zf_status_t zf_field_map_component(const zf_field_map_t *map,
                                   zf_field_component_t component, double *out,
                                   size_t len);

void zf_field_map_free(zf_field_map_t *map);

/* Loads a stack directory (manifest.json plus frame_NNNN.pgm files), bins
 * by bin_factor, fits every superpixel, and applies the default quality
 * thresholds (contrast >= 0.2%, FWHM <= 6 mT, shift error <= 0.5 mT). On
 * ZF_OK, *out owns the maps; free with zf_maps_free. */
zf_status_t zf_fit_stack(const char *stack_dir, uint32_t bin_factor,
                         zf_parameter_maps_t **out);

zf_status_t zf_maps_dims(const zf_parameter_maps_t *maps, uint32_t *nx,
                         uint32_t *ny);

/* Copies one fitted channel into out (NaN where rejected); len must equal
 * nx*ny. */
zf_status_t zf_maps_channel(const zf_parameter_maps_t *maps,
                            zf_map_channel_t channel, double *out, size_t len);

/* Copies the quality mask: 1 = rejected, 0 = kept; len must equal nx*ny. */
zf_status_t zf_maps_mask(const zf_parameter_maps_t *maps, uint8_t *out,
                         size_t len);

void zf_maps_free(zf_parameter_maps_t *maps);

/* Photon shot-noise limited sensitivity in field units:
 * dB = p_f * gamma_fwhm_T / (contrast * sqrt(photon_rate_hz)),
 * written to *out in T/sqrt(Hz). */
zf_status_t zf_sensitivity_field_units(double p_f, double gamma_fwhm_T,
                                       double contrast, double photon_rate_hz,
                                       double *out);

#ifdef __cplusplus
} /* extern "C" */
#endif

#endif /* ZEROFIELD_H */
