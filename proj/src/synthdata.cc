// src/synthdata.cc

// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//  http://www.apache.org/licenses/LICENSE-2.0
//
// THIS CODE IS PROVIDED *AS IS* BASIS, WITHOUT WARRANTIES OR CONDITIONS OF ANY
// KIND, EITHER EXPRESS OR IMPLIED, INCLUDING WITHOUT LIMITATION ANY IMPLIED
// WARRANTIES OR CONDITIONS OF TITLE, FITNESS FOR A PARTICULAR PURPOSE,
// MERCHANTABLITY OR NON-INFRINGEMENT.
// See the Apache 2 License for the specific language governing permissions and
// limitations under the License.

#include "avsd/synthdata.h"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <set>

namespace avsd {

void LipRoiSequence::validate() const {
  if (width <= 0 || height <= 0) throw Error("lip ROI: non-positive size");
  if (frames.rows() < 1) throw Error("lip ROI for " + speaker_id + ": no frames");
  if (frames.cols() != static_cast<Eigen::Index>(width) * height)
    throw ShapeError("lip ROI for " + speaker_id + ": row width " + std::to_string(frames.cols()) +
                     " != " + std::to_string(width * height));
}

namespace {

uint64_t splitmix(uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

uint64_t mix(uint64_t a, uint64_t b) { return splitmix(a ^ splitmix(b + 0x632be59bd9b4e019ULL)); }

using Rng = std::mt19937_64;

double uni(Rng &rng, double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); }

struct TurnDraw {
  int speaker_offset;  // added to the previous speaker (mod N), in [1, N-1]
  double length, gap, overlap, u;
};

// Each turn's random numbers depend only on (seed, turn index), so changing
// the overlap probability changes which transitions overlap but nothing else.
TurnDraw draw_turn(uint64_t seed, int index, int num_speakers) {
  Rng rng(mix(seed, static_cast<uint64_t>(index)));
  TurnDraw d;
  d.speaker_offset = 1 + static_cast<int>(rng() % static_cast<uint64_t>(num_speakers - 1));
  d.length = uni(rng, 1.0, 4.0);
  d.gap = uni(rng, 0.2, 1.0);
  d.overlap = uni(rng, 0.3, 1.5);
  d.u = uni(rng, 0.0, 1.0);
  return d;
}

// Activity at video rate, T_v x N.
constexpr double kRamp = 0.25;

// overlap_control in [0, 1 + kRamp]: 0 never overlaps, the maximum overlaps
// every transition fully.
Matrix turn_activity(uint64_t seed, int num_speakers, int frames, double rate, double overlap_control) {
  Matrix act = Matrix::Zero(frames, num_speakers);
  Rng first(mix(seed, 0xfeedULL));
  double start = uni(first, 0.0, 1.0);
  int speaker = static_cast<int>(first() % static_cast<uint64_t>(num_speakers));
  TurnDraw cur = draw_turn(seed, 0, num_speakers);
  for (int i = 0; start * rate < frames; ++i) {
    const double end = start + cur.length;
    const int a = std::max(0, static_cast<int>(std::lround(start * rate)));
    const int b = std::min(frames, static_cast<int>(std::lround(end * rate)));
    for (int t = a; t < b; ++t) act(t, speaker) = 1;
    TurnDraw next = draw_turn(seed, i + 1, num_speakers);
    // A transition's overlap grows continuously from 0 once the control
    // passes its draw u, so the overlap fraction is continuous in it.
    const double w = std::clamp((overlap_control - cur.u) / kRamp, 0.0, 1.0);
    if (w > 0) {
      const double ov = w * std::min(cur.overlap, std::min(cur.length, next.length) - 0.2);
      start = end - ov;
    } else {
      start = end + cur.gap;
    }
    speaker = (speaker + cur.speaker_offset) % num_speakers;
    cur = next;
  }
  return act;
}

// Binary episode mask with roughly the requested duty cycle.
std::vector<char> episodes(Rng &rng, int frames, double rate, double fraction, double mean_len_s) {
  std::vector<char> mask(frames, 0);
  if (fraction <= 0) return mask;
  const double p_end = 1.0 / std::max(1.0, mean_len_s * rate);
  const double p_start = p_end * fraction / std::max(1e-9, 1.0 - fraction);
  bool on = false;
  for (int t = 0; t < frames; ++t) {
    double u = uni(rng, 0.0, 1.0);
    on = on ? (u >= p_end) : (u < p_start);
    mask[t] = on;
  }
  return mask;
}

}  // namespace

void ScenarioConfig::validate() const {
  if (num_speakers < 2 || num_speakers > 6)
    throw Error("scenario: num_speakers must be in [2, 6], got " + std::to_string(num_speakers));
  if (!(duration > 0)) throw Error("scenario: duration must be positive");
  if (!(overlap_ratio >= 0 && overlap_ratio < 1)) throw Error("scenario: overlap_ratio must be in [0, 1)");
  if (!(noise_level >= 0)) throw Error("scenario: noise_level must be non-negative");
  if (!(visual_rate > 0) || !(audio_rate > 0)) throw Error("scenario: rates must be positive");
  const double ratio = audio_rate / visual_rate;
  if (std::abs(ratio - std::round(ratio)) > 1e-9 || ratio < 1)
    throw Error("scenario: audio_rate must be an integer multiple of visual_rate");
  if (!identity_pool.empty() && static_cast<int>(identity_pool.size()) < num_speakers)
    throw Error("scenario: identity pool smaller than num_speakers");
  if (feature_dim < 1 || roi_size < 4) throw Error("scenario: bad feature_dim/roi_size");
}

std::string identity_name(int index) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "spk%03d", index);
  return buf;
}

SpeakerIdentity make_identity(int index, uint64_t universe_seed, int feature_dim) {
  Rng rng(mix(universe_seed ^ 0x5eedULL, static_cast<uint64_t>(index)));
  SpeakerIdentity id;
  id.index = index;
  id.id = identity_name(index);
  RowVector tpl = RowVector::Constant(feature_dim, 0.15f);
  const double tilt = uni(rng, -0.5, 0.5);
  for (int k = 0; k < feature_dim; ++k) tpl(k) += static_cast<Real>(0.3 * (1.0 + tilt * (k / double(feature_dim) - 0.5)));
  for (int j = 0; j < 3; ++j) {
    const double c = uni(rng, 0.0, feature_dim), w = uni(rng, 2.0, 6.0), h = uni(rng, 0.6, 1.6);
    for (int k = 0; k < feature_dim; ++k) tpl(k) += static_cast<Real>(h * std::exp(-(k - c) * (k - c) / (2 * w * w)));
  }
  const double rms = std::sqrt(tpl.squaredNorm() / feature_dim);
  id.spectral_template = tpl / static_cast<Real>(rms);
  id.loudness = uni(rng, 0.8, 1.2);
  id.syllable_rate = uni(rng, 3.0, 5.0);
  id.face_level = uni(rng, 0.5, 0.8);
  id.mouth_width = uni(rng, 3.0, 5.0);
  return id;
}

int ScenarioBundle::visual_repeat() const { return static_cast<int>(std::lround(audio_rate / visual_rate)); }

ActivityMatrix ScenarioBundle::truth_activity() const {
  return segments_to_activity(truth, audio_rate, num_frames(), speaker_identities);
}

double overlap_fraction(const ActivityMatrix &activity) {
  int64_t speech = 0, overlap = 0;
  for (int t = 0; t < activity.num_frames(); ++t) {
    int n = 0;
    for (int s = 0; s < activity.num_speakers(); ++s) n += activity.active(t, s);
    speech += n >= 1;
    overlap += n >= 2;
  }
  return speech == 0 ? 0.0 : static_cast<double>(overlap) / static_cast<double>(speech);
}

ScenarioBundle generate_scenario(const ScenarioConfig &config) {
  config.validate();
  const int N = config.num_speakers;
  const int repeat = static_cast<int>(std::lround(config.audio_rate / config.visual_rate));
  const int Tv = static_cast<int>(std::lround(config.duration * config.visual_rate));
  const int T = Tv * repeat;
  if (Tv < 1) throw Error("scenario: duration shorter than one video frame");

  Rng rng(mix(config.seed, 0xabcdefULL));

  // Speakers.
  std::vector<int> pool = config.identity_pool;
  if (pool.empty()) {
    pool.resize(N);
    std::iota(pool.begin(), pool.end(), 0);
  }
  std::shuffle(pool.begin(), pool.end(), rng);
  std::vector<SpeakerIdentity> speakers;
  for (int n = 0; n < N; ++n) speakers.push_back(make_identity(pool[n], config.universe_seed, config.feature_dim));
  std::sort(speakers.begin(), speakers.end(), [](const auto &a, const auto &b) { return a.index < b.index; });

  // Activity: bisect the overlap control toward the target.
  const uint64_t turn_seed = mix(config.seed, 0x7u);
  auto measure = [&](double q) {
    ActivityMatrix m;
    m.values = turn_activity(turn_seed, N, Tv, config.visual_rate, q);
    m.frame_rate = config.visual_rate;
    for (int n = 0; n < N; ++n) m.speaker_order.push_back(speakers[n].id);
    return m;
  };
  const double target = config.overlap_ratio;
  ActivityMatrix act_v = measure(0.0);
  double achieved = overlap_fraction(act_v);
  if (achieved != target) {
    double lo = 0.0, hi = 1.0 + kRamp;
    ActivityMatrix best = act_v;
    double best_err = std::abs(achieved - target);
    for (int it = 0; it < 40; ++it) {
      const double q = 0.5 * (lo + hi);
      ActivityMatrix m = measure(q);
      const double f = overlap_fraction(m);
      if (std::abs(f - target) < best_err) {
        best_err = std::abs(f - target);
        best = m;
      }
      if (f < target) lo = q; else hi = q;
    }
    act_v = best;
    achieved = overlap_fraction(act_v);
  }
  if (std::abs(achieved - target) > 0.05) {
    char buf[160];
    std::snprintf(buf, sizeof buf, "scenario: overlap_ratio %.3f infeasible for %d speakers over %.1f s (closest %.3f)",
                  target, N, config.duration, achieved);
    throw Error(buf);
  }

  ScenarioBundle b;
  b.recording_id = config.recording_id.empty() ? "rec" + std::to_string(config.seed) : config.recording_id;
  b.audio_rate = config.audio_rate;
  b.visual_rate = config.visual_rate;
  for (const auto &s : speakers) b.speaker_identities.push_back(s.id);

  // Truth from the video-rate grid; onsets land on 1/visual_rate boundaries.
  b.truth = activity_to_segments(act_v, 0.0, b.recording_id);
  std::stable_sort(b.truth.begin(), b.truth.end(), [](const Segment &x, const Segment &y) { return x.onset < y.onset; });

  // Acoustic features.
  std::normal_distribution<double> gauss(0.0, 1.0);
  b.audio_features.resize(T, config.feature_dim);
  std::vector<double> phase(N);
  for (int n = 0; n < N; ++n) phase[n] = uni(rng, 0.0, M_PI);
  for (int t = 0; t < T; ++t) {
    RowVector row = RowVector::Zero(config.feature_dim);
    const int tv = t / repeat;
    for (int n = 0; n < N; ++n) {
      if (act_v.values(tv, n) < 0.5) continue;
      const double s = std::sin(M_PI * speakers[n].syllable_rate * t / config.audio_rate + phase[n]);
      const double env = speakers[n].loudness * (0.6 + 0.4 * s * s);
      row += static_cast<Real>(env) * speakers[n].spectral_template;
    }
    for (int k = 0; k < config.feature_dim; ++k) row(k) += static_cast<Real>(config.noise_level * gauss(rng));
    b.audio_features.row(t) = row;
  }

  // Lip ROIs.
  const int S = config.roi_size;
  const double cx = (S - 1) / 2.0, cy = S * 0.62;
  const double pixel_noise = 0.02 + 0.1 * config.noise_level;
  for (int n = 0; n < N; ++n) {
    const SpeakerIdentity &id = speakers[n];
    LipRoiSequence roi;
    roi.speaker_id = id.id;
    roi.width = S;
    roi.height = S;
    roi.frames.resize(Tv, S * S);
    std::vector<char> silent(Tv);
    for (int t = 0; t < Tv; ++t) silent[t] = act_v.values(t, n) < 0.5;
    auto occluded = episodes(rng, Tv, config.visual_rate, config.occlusion_rate, 1.0);
    auto distract = episodes(rng, Tv, config.visual_rate, config.distractor_rate, 1.0);
    const double ph = uni(rng, 0.0, 2 * M_PI);
    for (int t = 0; t < Tv; ++t) {
      const double time = t / config.visual_rate;
      double open = 0.0;
      if (!silent[t]) {
        open = 0.5 * (1.0 + std::sin(2 * M_PI * id.syllable_rate * time + ph)) + uni(rng, -0.15, 0.15);
        open = 0.25 + 0.75 * std::clamp(open, 0.0, 1.0);
      } else if (distract[t]) {
        open = 0.35 * 0.5 * (1.0 + std::sin(2 * M_PI * 1.5 * time + ph));
      }
      const double half_h = 0.6 + 2.6 * open;
      for (int y = 0; y < S; ++y)
        for (int x = 0; x < S; ++x) {
          double v;
          if (occluded[t]) {
            v = id.face_level + uni(rng, -0.25, 0.25);
          } else {
            const double dx = (x - cx) / id.mouth_width, dy = (y - cy) / half_h;
            const double inside = 1.0 / (1.0 + std::exp(-4.0 * (1.0 - dx * dx - dy * dy)));
            v = id.face_level - (id.face_level - 0.1) * inside;
          }
          v += pixel_noise * gauss(rng);
          roi.frames(t, y * S + x) = static_cast<Real>(std::clamp(v, 0.0, 1.0));
        }
    }
    b.lip_rois.push_back(std::move(roi));
  }
  return b;
}

void SplitConfig::validate() const {
  scenario.validate();
  if (train_count < 0 || dev_count < 0 || test_count < 0) throw Error("split: negative scenario count");
  struct Range {
    const char *name;
    uint64_t lo, hi;
  };
  std::vector<Range> r{{"train", train_seed, train_seed + static_cast<uint64_t>(train_count)},
                       {"dev", dev_seed, dev_seed + static_cast<uint64_t>(dev_count)},
                       {"test", test_seed, test_seed + static_cast<uint64_t>(test_count)}};
  for (size_t i = 0; i < r.size(); ++i)
    for (size_t j = i + 1; j < r.size(); ++j)
      if (r[i].lo < r[j].hi && r[j].lo < r[i].hi && r[i].hi > r[i].lo && r[j].hi > r[j].lo)
        throw Error(std::string("split: seed ranges of ") + r[i].name + " and " + r[j].name + " overlap");
  const int n = scenario.num_speakers;
  if (train_identities < n || dev_identities < n || test_identities < n)
    throw Error("split: each identity pool needs at least num_speakers identities");
}

DatasetSplit make_split(const SplitConfig &config) {
  config.validate();
  DatasetSplit out;
  int next = 0;
  auto alloc = [&next](int count) {
    std::vector<int> pool(count);
    std::iota(pool.begin(), pool.end(), next);
    next += count;
    return pool;
  };
  out.train_pool = alloc(config.train_identities);
  out.dev_pool = alloc(config.dev_identities);
  out.test_pool = alloc(config.test_identities);
  auto build = [&](const char *name, uint64_t seed0, int count, const std::vector<int> &pool) {
    std::vector<ScenarioBundle> v;
    for (int i = 0; i < count; ++i) {
      ScenarioConfig c = config.scenario;
      c.seed = seed0 + static_cast<uint64_t>(i);
      c.identity_pool = pool;
      char buf[64];
      std::snprintf(buf, sizeof buf, "%s_%03d", name, i);
      c.recording_id = buf;
      v.push_back(generate_scenario(c));
    }
    return v;
  };
  out.train = build("train", config.train_seed, config.train_count, out.train_pool);
  out.dev = build("dev", config.dev_seed, config.dev_count, out.dev_pool);
  out.test = build("test", config.test_seed, config.test_count, out.test_pool);
  return out;
}

TensorFile scenario_to_tensor_file(const ScenarioBundle &b) {
  TensorFile f;
  f.meta["recording_id"] = b.recording_id;
  f.meta["audio_rate"] = b.audio_rate;
  f.meta["visual_rate"] = b.visual_rate;
  f.meta["speakers"] = b.speaker_identities;
  f.meta["truth_rttm"] = write_rttm(b.truth);
  f.add("audio_features", b.audio_features);
  for (const auto &roi : b.lip_rois)
    f.add("lip:" + roi.speaker_id, {roi.frames.rows(), roi.height, roi.width}, roi.frames);
  return f;
}

ScenarioBundle scenario_from_tensor_file(const TensorFile &f) {
  ScenarioBundle b;
  b.recording_id = f.meta.at("recording_id").get<std::string>();
  b.audio_rate = f.meta.at("audio_rate").get<double>();
  b.visual_rate = f.meta.at("visual_rate").get<double>();
  b.speaker_identities = f.meta.at("speakers").get<std::vector<std::string>>();
  b.truth = parse_rttm(f.meta.value("truth_rttm", std::string()));
  b.audio_features = f.get("audio_features").data;
  for (const auto &spk : b.speaker_identities) {
    const auto &t = f.get("lip:" + spk);
    LipRoiSequence roi;
    roi.speaker_id = spk;
    roi.height = static_cast<int>(t.shape.at(1));
    roi.width = static_cast<int>(t.shape.at(2));
    roi.frames = t.data;
    b.lip_rois.push_back(std::move(roi));
  }
  return b;
}

}  // namespace avsd
