#pragma once

#include <cstdint>
#include <string>
#include <variant>
#include <vector>

#include "dynloc/complex_matrix.hpp"
#include "dynloc/geometry.hpp"

namespace dynloc {

inline constexpr double kSpeedOfLight = 299792458.0;

// Uniform linear array and OFDM numerology at the base station.
struct ArrayConfig {
  std::size_t n_antennas = 16;        // L
  double antenna_spacing = 0.5;       // in wavelengths
  double carrier_frequency = 3.6e9;   // Hz
  double bandwidth = 20e6;            // Hz
  std::size_t n_subcarriers = 32;     // K
  Vec2 bs_position{0.0, 0.0};

  bool operator==(const ArrayConfig&) const = default;

  double subcarrier_spacing() const {
    return bandwidth / static_cast<double>(n_subcarriers);
  }
  // Longest delay representable without aliasing across the OFDM band.
  double max_delay() const {
    return static_cast<double>(n_subcarriers) / bandwidth;
  }
  void validate() const;
};

// Two-bounce scattering cluster: energy travels UE -> FBS -> LBS -> BS.
// All cluster-internal randomness (subpath geometry, path phases) derives
// from phase_seed alone, so a cluster contributes identically to every
// environment that contains it.
struct Cluster {
  std::int64_t cluster_id = 0;
  Vec2 fbs_position;
  Vec2 lbs_position;
  double power_scale = 1.0;
  std::uint64_t phase_seed = 0;
  std::size_t n_subpaths = 4;
  double subpath_spread = 0.5;  // meters

  bool operator==(const Cluster&) const = default;
  void validate() const;
};

// A snapshot of the scattering geometry at one time point.
struct Environment {
  std::vector<Cluster> clusters;
  ArrayConfig array;
  Rect area;
  std::string time_label = "t1";
  std::uint64_t rng_seed = 0;
  double path_loss_exponent = 2.0;

  bool operator==(const Environment&) const = default;
  void validate() const;
  const Cluster* find_cluster(std::int64_t id) const;
};

// Complex space-frequency channel (L x K) observed at the BS for one UE
// position.
struct ChannelMatrix {
  CMatrix entries;
  Vec2 position;
};

// Default experiment geometry: BS at the origin, 40 m x 40 m area
// centered at [0, 60].
Rect default_area();
ArrayConfig default_array();

struct ClusterDrift {
  std::int64_t cluster_id;
  Vec2 offset;
};

struct RemoveMutation {
  std::vector<std::int64_t> cluster_ids;
};
struct DriftMutation {
  std::vector<ClusterDrift> drifts;
};
struct AddMutation {
  std::size_t count = 0;
  std::uint64_t seed = 0;
};
using Mutation = std::variant<RemoveMutation, DriftMutation, AddMutation>;

// Draws n_clusters two-bounce clusters uniformly inside the bounding box of
// the area and the BS expanded by 10 m. Deterministic in seed.
Environment generate_environment(std::uint64_t seed, std::size_t n_clusters,
                                 const ArrayConfig& array, const Rect& area);

// New environment sharing every unmutated cluster bit-identically.
Environment derive_environment(const Environment& env, const Mutation& mutation,
                               const std::string& time_label);

// Synthesizes the space-frequency channel at `position`:
//   H[l,k] = sum_p g_p * exp(-j*pi*l*sin(theta_p)) * exp(-j*2*pi*k*df*tau_p)
// over all cluster subpaths, with tau the total UE->FBS->LBS->BS flight time
// and theta the arrival angle at the array from the LBS. Throws if any path
// delay exceeds the unambiguous OFDM window, naming the offending cluster.
ChannelMatrix synthesize_channel(const Environment& env, const Vec2& position);

// n i.i.d. uniform positions in the area; deterministic in seed.
std::vector<Vec2> sample_positions(const Rect& area, std::size_t n,
                                   std::uint64_t seed);

// Optional measurement noise: complex AWGN scaled so that the per-entry
// signal-to-noise ratio matches snr_db. Disabled by default everywhere.
void add_awgn(ChannelMatrix& channel, double snr_db, std::uint64_t seed);

// ULA response for a given direction sine (unit magnitude entries over
// antenna index l: exp(-j*pi*l*s)).
std::vector<Complex> steering_vector(std::size_t n_antennas, double sin_theta);

// Per-subcarrier phase ramp of a path delay: exp(-j*2*pi*k*df*tau).
std::vector<Complex> delay_tone(std::size_t n_subcarriers, double subcarrier_spacing,
                                double tau);

// JSON round trip, exact for integers and bit-faithful for reals.
std::string environment_to_json(const Environment& env);
Environment environment_from_json(const std::string& text);
void save_environment(const Environment& env, const std::string& path);
Environment load_environment(const std::string& path);

}  // namespace dynloc
