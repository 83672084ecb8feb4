#include "dynloc/channel.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <set>
#include <sstream>

#include <json.hpp>

#include "dynloc/errors.hpp"
#include "dynloc/rng.hpp"

namespace dynloc {

namespace {

constexpr double kClusterBoxMargin = 10.0;  // meters around area + BS

bool finite(const Vec2& v) { return std::isfinite(v.x) && std::isfinite(v.y); }

struct Subpath {
  Vec2 fbs;
  Vec2 lbs;
  double phase;
};

// Subpath geometry and phases depend only on the cluster's own seed, so a
// cluster shared between environments contributes identically to both.
std::vector<Subpath> cluster_subpaths(const Cluster& c) {
  Rng rng(c.phase_seed);
  std::vector<Subpath> out;
  out.reserve(c.n_subpaths);
  for (std::size_t s = 0; s < c.n_subpaths; ++s) {
    Subpath p;
    p.fbs = {c.fbs_position.x + rng.normal() * c.subpath_spread,
             c.fbs_position.y + rng.normal() * c.subpath_spread};
    p.lbs = {c.lbs_position.x + rng.normal() * c.subpath_spread,
             c.lbs_position.y + rng.normal() * c.subpath_spread};
    p.phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
    out.push_back(p);
  }
  return out;
}

Cluster draw_cluster(Rng& rng, const Rect& box, std::int64_t id) {
  Cluster c;
  c.cluster_id = id;
  c.fbs_position = {rng.uniform(box.min_x, box.max_x), rng.uniform(box.min_y, box.max_y)};
  c.lbs_position = {rng.uniform(box.min_x, box.max_x), rng.uniform(box.min_y, box.max_y)};
  c.power_scale = rng.log_uniform(0.1, 1.0);
  c.phase_seed = rng.next_u64();
  return c;
}

}  // namespace

void ArrayConfig::validate() const {
  if (n_antennas < 1) throw InvalidArgument("array: L must be >= 1");
  if (n_subcarriers < 1) throw InvalidArgument("array: K must be >= 1");
  if (!(bandwidth > 0.0)) throw InvalidArgument("array: bandwidth must be positive");
  if (!(carrier_frequency > 0.0)) throw InvalidArgument("array: carrier frequency must be positive");
  if (!(antenna_spacing > 0.0)) throw InvalidArgument("array: antenna spacing must be positive");
  if (!finite(bs_position)) throw InvalidArgument("array: BS position must be finite");
}

void Cluster::validate() const {
  if (!finite(fbs_position) || !finite(lbs_position)) {
    throw InvalidArgument("cluster " + std::to_string(cluster_id) + ": positions must be finite");
  }
  if (!(power_scale > 0.0)) {
    throw InvalidArgument("cluster " + std::to_string(cluster_id) + ": power_scale must be positive");
  }
  if (n_subpaths < 1) {
    throw InvalidArgument("cluster " + std::to_string(cluster_id) + ": needs at least one subpath");
  }
  if (!(subpath_spread >= 0.0)) {
    throw InvalidArgument("cluster " + std::to_string(cluster_id) + ": spread must be >= 0");
  }
}

void Environment::validate() const {
  array.validate();
  if (clusters.empty()) throw InvalidArgument("environment: needs at least one cluster");
  if (area.degenerate()) throw InvalidArgument("environment: degenerate area");
  std::set<std::int64_t> ids;
  for (const Cluster& c : clusters) {
    c.validate();
    if (!ids.insert(c.cluster_id).second) {
      throw InvalidArgument("environment: duplicate cluster id " + std::to_string(c.cluster_id));
    }
  }
}

const Cluster* Environment::find_cluster(std::int64_t id) const {
  for (const Cluster& c : clusters) {
    if (c.cluster_id == id) return &c;
  }
  return nullptr;
}

Rect default_area() { return {-20.0, 40.0, 20.0, 80.0}; }

ArrayConfig default_array() { return {}; }

Environment generate_environment(std::uint64_t seed, std::size_t n_clusters,
                                 const ArrayConfig& array, const Rect& area) {
  array.validate();
  if (n_clusters < 1) throw InvalidArgument("generate_environment: n_clusters must be >= 1");
  if (area.degenerate()) throw InvalidArgument("generate_environment: degenerate area");

  Environment env;
  env.array = array;
  env.area = area;
  env.rng_seed = seed;
  env.time_label = "t1";

  const Rect box = area.including(array.bs_position).expanded(kClusterBoxMargin);
  Rng rng(substream_seed(seed, "environment"));
  env.clusters.reserve(n_clusters);
  for (std::size_t i = 0; i < n_clusters; ++i) {
    env.clusters.push_back(draw_cluster(rng, box, static_cast<std::int64_t>(i)));
  }
  return env;
}

Environment derive_environment(const Environment& env, const Mutation& mutation,
                               const std::string& time_label) {
  env.validate();
  Environment out = env;
  out.time_label = time_label;

  if (const auto* rm = std::get_if<RemoveMutation>(&mutation)) {
    for (std::int64_t id : rm->cluster_ids) {
      if (env.find_cluster(id) == nullptr) {
        throw InvalidArgument("derive_environment: unknown cluster id " + std::to_string(id));
      }
    }
    std::erase_if(out.clusters, [&](const Cluster& c) {
      return std::find(rm->cluster_ids.begin(), rm->cluster_ids.end(), c.cluster_id) !=
             rm->cluster_ids.end();
    });
    if (out.clusters.empty()) {
      throw InvalidArgument("derive_environment: removal would leave no clusters");
    }
  } else if (const auto* dr = std::get_if<DriftMutation>(&mutation)) {
    for (const ClusterDrift& d : dr->drifts) {
      if (!finite(d.offset)) throw InvalidArgument("derive_environment: drift offset must be finite");
      bool found = false;
      for (Cluster& c : out.clusters) {
        if (c.cluster_id == d.cluster_id) {
          c.fbs_position = c.fbs_position + d.offset;
          c.lbs_position = c.lbs_position + d.offset;
          found = true;
          break;
        }
      }
      if (!found) {
        throw InvalidArgument("derive_environment: unknown cluster id " +
                              std::to_string(d.cluster_id));
      }
    }
  } else if (const auto* add = std::get_if<AddMutation>(&mutation)) {
    std::int64_t next_id = 0;
    for (const Cluster& c : env.clusters) next_id = std::max(next_id, c.cluster_id + 1);
    const Rect box = env.area.including(env.array.bs_position).expanded(kClusterBoxMargin);
    Rng rng(substream_seed(add->seed, "environment"));
    for (std::size_t i = 0; i < add->count; ++i) {
      out.clusters.push_back(draw_cluster(rng, box, next_id++));
    }
  }
  out.validate();
  return out;
}

std::vector<Complex> steering_vector(std::size_t n_antennas, double sin_theta) {
  std::vector<Complex> v(n_antennas);
  for (std::size_t l = 0; l < n_antennas; ++l) {
    v[l] = std::polar(1.0, -std::numbers::pi * static_cast<double>(l) * sin_theta);
  }
  return v;
}

std::vector<Complex> delay_tone(std::size_t n_subcarriers, double subcarrier_spacing,
                                double tau) {
  std::vector<Complex> v(n_subcarriers);
  for (std::size_t k = 0; k < n_subcarriers; ++k) {
    v[k] = std::polar(1.0, -2.0 * std::numbers::pi * static_cast<double>(k) *
                               subcarrier_spacing * tau);
  }
  return v;
}

ChannelMatrix synthesize_channel(const Environment& env, const Vec2& position) {
  env.validate();
  if (!finite(position)) throw InvalidArgument("synthesize_channel: position must be finite");

  const ArrayConfig& arr = env.array;
  const double df = arr.subcarrier_spacing();
  const double delay_limit = arr.max_delay();

  ChannelMatrix out;
  out.position = position;
  out.entries = CMatrix(arr.n_antennas, arr.n_subcarriers);

  for (const Cluster& c : env.clusters) {
    const double amp0 = std::sqrt(c.power_scale / static_cast<double>(c.n_subpaths));
    for (const Subpath& p : cluster_subpaths(c)) {
      const double leg_ue = distance(position, p.fbs);
      const double leg_mid = distance(p.fbs, p.lbs);
      const double leg_bs = distance(p.lbs, arr.bs_position);
      const double total = leg_ue + leg_mid + leg_bs;
      const double tau = total / kSpeedOfLight;
      if (tau >= delay_limit) {
        throw InvalidArgument("synthesize_channel: path delay of cluster " +
                              std::to_string(c.cluster_id) +
                              " exceeds the OFDM delay window (" +
                              std::to_string(total) + " m)");
      }
      const double sin_theta = leg_bs > 0.0 ? (p.lbs.x - arr.bs_position.x) / leg_bs : 0.0;
      const Complex gain = std::polar(
          amp0 * std::pow(total, -env.path_loss_exponent / 2.0), p.phase);
      const auto steer = steering_vector(arr.n_antennas, sin_theta);
      const auto tone = delay_tone(arr.n_subcarriers, df, tau);
      for (std::size_t l = 0; l < arr.n_antennas; ++l) {
        const Complex row = gain * steer[l];
        Complex* dst = out.entries.data.data() + l * arr.n_subcarriers;
        for (std::size_t k = 0; k < arr.n_subcarriers; ++k) {
          dst[k] += row * tone[k];
        }
      }
    }
  }
  return out;
}

std::vector<Vec2> sample_positions(const Rect& area, std::size_t n, std::uint64_t seed) {
  if (n < 1) throw InvalidArgument("sample_positions: n must be >= 1");
  if (area.degenerate()) throw InvalidArgument("sample_positions: degenerate area");
  Rng rng(substream_seed(seed, "positions"));
  std::vector<Vec2> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    out.push_back({rng.uniform(area.min_x, area.max_x), rng.uniform(area.min_y, area.max_y)});
  }
  return out;
}

void add_awgn(ChannelMatrix& channel, double snr_db, std::uint64_t seed) {
  double mean_power = 0.0;
  for (const Complex& v : channel.entries.data) mean_power += std::norm(v);
  mean_power /= static_cast<double>(channel.entries.data.size());
  const double noise_power = mean_power / std::pow(10.0, snr_db / 10.0);
  const double sigma = std::sqrt(noise_power / 2.0);
  Rng rng(substream_seed(seed, "awgn"));
  for (Complex& v : channel.entries.data) {
    v += Complex(rng.normal() * sigma, rng.normal() * sigma);
  }
}

namespace {

using nlohmann::json;

json vec2_json(const Vec2& v) { return json::array({v.x, v.y}); }

Vec2 vec2_from(const json& j) { return {j.at(0).get<double>(), j.at(1).get<double>()}; }

}  // namespace

std::string environment_to_json(const Environment& env) {
  json j;
  j["time_label"] = env.time_label;
  j["rng_seed"] = env.rng_seed;
  j["path_loss_exponent"] = env.path_loss_exponent;
  j["area"] = {{"min_x", env.area.min_x},
               {"min_y", env.area.min_y},
               {"max_x", env.area.max_x},
               {"max_y", env.area.max_y}};
  j["array"] = {{"n_antennas", env.array.n_antennas},
                {"antenna_spacing", env.array.antenna_spacing},
                {"carrier_frequency_hz", env.array.carrier_frequency},
                {"bandwidth_hz", env.array.bandwidth},
                {"n_subcarriers", env.array.n_subcarriers},
                {"bs_position", vec2_json(env.array.bs_position)}};
  json clusters = json::array();
  for (const Cluster& c : env.clusters) {
    clusters.push_back({{"cluster_id", c.cluster_id},
                        {"fbs_position", vec2_json(c.fbs_position)},
                        {"lbs_position", vec2_json(c.lbs_position)},
                        {"power_scale", c.power_scale},
                        {"phase_seed", c.phase_seed},
                        {"n_subpaths", c.n_subpaths},
                        {"subpath_spread", c.subpath_spread}});
  }
  j["clusters"] = std::move(clusters);
  return j.dump(2) + "\n";
}

Environment environment_from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw IoError(std::string("environment: JSON parse error: ") + e.what());
  }
  try {
    Environment env;
    env.time_label = j.at("time_label").get<std::string>();
    env.rng_seed = j.at("rng_seed").get<std::uint64_t>();
    env.path_loss_exponent = j.at("path_loss_exponent").get<double>();
    const json& a = j.at("area");
    env.area = {a.at("min_x").get<double>(), a.at("min_y").get<double>(),
                a.at("max_x").get<double>(), a.at("max_y").get<double>()};
    const json& ar = j.at("array");
    env.array.n_antennas = ar.at("n_antennas").get<std::size_t>();
    env.array.antenna_spacing = ar.at("antenna_spacing").get<double>();
    env.array.carrier_frequency = ar.at("carrier_frequency_hz").get<double>();
    env.array.bandwidth = ar.at("bandwidth_hz").get<double>();
    env.array.n_subcarriers = ar.at("n_subcarriers").get<std::size_t>();
    env.array.bs_position = vec2_from(ar.at("bs_position"));
    for (const json& cj : j.at("clusters")) {
      Cluster c;
      c.cluster_id = cj.at("cluster_id").get<std::int64_t>();
      c.fbs_position = vec2_from(cj.at("fbs_position"));
      c.lbs_position = vec2_from(cj.at("lbs_position"));
      c.power_scale = cj.at("power_scale").get<double>();
      c.phase_seed = cj.at("phase_seed").get<std::uint64_t>();
      c.n_subpaths = cj.at("n_subpaths").get<std::size_t>();
      c.subpath_spread = cj.at("subpath_spread").get<double>();
      env.clusters.push_back(c);
    }
    env.validate();
    return env;
  } catch (const json::exception& e) {
    throw IoError(std::string("environment: missing or malformed field: ") + e.what());
  }
}

void save_environment(const Environment& env, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open " + path + " for writing");
  out << environment_to_json(env);
  if (!out) throw IoError("write failed: " + path);
}

Environment load_environment(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return environment_from_json(ss.str());
}

}  // namespace dynloc
