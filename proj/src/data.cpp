#include "multinet/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include "multinet/binio.hpp"
#include "multinet/rng.hpp"

namespace multinet::data {

const char* op_mode_name(OperationalMode m) {
    switch (m) {
        case OperationalMode::Expert: return "expert";
        case OperationalMode::Autonomous: return "autonomous";
        case OperationalMode::Correctional: return "correctional";
    }
    return "?";
}

void RawStream::validate(const char* name) const {
    for (std::size_t i = 1; i < samples.size(); ++i)
        if (samples[i].t_ms <= samples[i - 1].t_ms)
            throw DataError(std::string("raw stream ") + name + ": timestamps not strictly increasing at sample " +
                            std::to_string(i));
}

std::array<std::size_t, 3> Dataset::mode_counts() const {
    std::array<std::size_t, 3> c{0, 0, 0};
    for (const DataMoment& m : moments) ++c[static_cast<std::size_t>(m.behavioral)];
    return c;
}

std::array<std::size_t, 3> Dataset::op_counts() const {
    std::array<std::size_t, 3> c{0, 0, 0};
    for (const DataMoment& m : moments) ++c[static_cast<std::size_t>(m.operational)];
    return c;
}

void Dataset::append(Dataset other) {
    moments.reserve(moments.size() + other.moments.size());
    for (DataMoment& m : other.moments) moments.push_back(std::move(m));
}

// ---------------------------------------------------------------------------
// Interpolation

namespace {

double interp_at(const RawStream& s, std::uint64_t t, std::size_t& cursor) {
    const auto& v = s.samples;
    while (cursor + 1 < v.size() && v[cursor + 1].t_ms <= t) ++cursor;
    if (v[cursor].t_ms == t || cursor + 1 == v.size()) return v[cursor].value;
    const RawSample& a = v[cursor];
    const RawSample& b = v[cursor + 1];
    const double w = static_cast<double>(t - a.t_ms) / static_cast<double>(b.t_ms - a.t_ms);
    return a.value + (b.value - a.value) * w;
}

} // namespace

GriddedSignals interpolate_streams(const RawStream& steer, const RawStream& motor, std::uint64_t grid_ms) {
    if (grid_ms == 0) throw DataError("interpolate_streams: grid must be positive");
    steer.validate("steer");
    motor.validate("motor");
    if (steer.samples.empty() || motor.samples.empty())
        throw DataError("interpolate_streams: empty control stream");

    const std::uint64_t env_lo = std::min(steer.samples.front().t_ms, motor.samples.front().t_ms);
    const std::uint64_t env_hi = std::max(steer.samples.back().t_ms, motor.samples.back().t_ms);
    const std::uint64_t sup_lo = std::max(steer.samples.front().t_ms, motor.samples.front().t_ms);
    const std::uint64_t sup_hi = std::min(steer.samples.back().t_ms, motor.samples.back().t_ms);

    GriddedSignals out;
    out.grid_ms = grid_ms;
    const std::int64_t env_t0 = static_cast<std::int64_t>((env_lo + grid_ms - 1) / grid_ms);
    const std::int64_t env_t1 = static_cast<std::int64_t>(env_hi / grid_ms);
    const std::int64_t t0 = static_cast<std::int64_t>((sup_lo + grid_ms - 1) / grid_ms);
    const std::int64_t t1 = static_cast<std::int64_t>(sup_hi / grid_ms);
    out.first_tick = t0;
    if (t1 >= t0) {
        out.steer.reserve(static_cast<std::size_t>(t1 - t0 + 1));
        out.motor.reserve(static_cast<std::size_t>(t1 - t0 + 1));
        std::size_t cs = 0, cm = 0;
        for (std::int64_t k = t0; k <= t1; ++k) {
            const std::uint64_t t = static_cast<std::uint64_t>(k) * grid_ms;
            out.steer.push_back(interp_at(steer, t, cs));
            out.motor.push_back(interp_at(motor, t, cm));
        }
    }
    const std::int64_t env_count = env_t1 >= env_t0 ? env_t1 - env_t0 + 1 : 0;
    out.skipped = static_cast<std::size_t>(env_count) - out.steer.size();
    return out;
}

// ---------------------------------------------------------------------------
// Moment assembly

Dataset assemble_moments(const GriddedSignals& signals, const ImageStream& images,
                         model::BehavioralMode behavioral,
                         const std::vector<OperationalMode>& op_tags, AssemblyReport* report) {
    if (op_tags.size() != signals.steer.size())
        throw DataError("assemble_moments: op tag count " + std::to_string(op_tags.size()) +
                        " != gridded tick count " + std::to_string(signals.steer.size()));
    const std::size_t n_ticks = signals.steer.size();
    const std::uint64_t grid = signals.grid_ms;

    // Snap each image sample to its nearest grid tick; on a tick collision the
    // earlier frame wins (no pixel interpolation ever happens).
    std::vector<std::int64_t> image_at; // tick -> image index, aligned with signals
    image_at.assign(n_ticks, -1);
    for (std::size_t i = 0; i < images.samples.size(); ++i) {
        const ImageSample& s = images.samples[i];
        if (s.left.size() != kImageBytes || s.right.size() != kImageBytes)
            throw DataError("assemble_moments: image sample " + std::to_string(i) + " has wrong byte size");
        const std::int64_t tick = static_cast<std::int64_t>((s.t_ms + grid / 2) / grid);
        const std::int64_t rel = tick - signals.first_tick;
        if (rel < 0 || rel >= static_cast<std::int64_t>(n_ticks)) continue;
        if (image_at[static_cast<std::size_t>(rel)] < 0)
            image_at[static_cast<std::size_t>(rel)] = static_cast<std::int64_t>(i);
    }

    Dataset out;
    AssemblyReport rep;
    constexpr std::size_t lookahead = nn::kTrajectorySteps;
    for (std::size_t rel = 0; rel < n_ticks; ++rel) {
        const bool has_history = rel >= 1 && image_at[rel] >= 0 && image_at[rel - 1] >= 0;
        const bool has_lookahead = rel + lookahead < n_ticks;
        if (!has_history || !has_lookahead) {
            ++rep.skipped;
            continue;
        }
        DataMoment m;
        m.behavioral = behavioral;
        m.operational = op_tags[rel];
        m.timestamp_ms = static_cast<std::uint64_t>(signals.first_tick + static_cast<std::int64_t>(rel)) * grid;
        for (std::size_t k = 0; k < lookahead; ++k) {
            const double s = signals.steer[rel + 1 + k];
            const double mo = signals.motor[rel + 1 + k];
            if (s < 0.0 || s > 1.0 || mo < 0.0 || mo > 1.0)
                throw DataError("assemble_moments: control value outside [0,1] at tick " +
                                std::to_string(signals.first_tick + static_cast<std::int64_t>(rel + 1 + k)));
            m.labels.steer[k] = s;
            m.labels.motor[k] = mo;
        }
        const ImageSample& cur = images.samples[static_cast<std::size_t>(image_at[rel])];
        const ImageSample& prev = images.samples[static_cast<std::size_t>(image_at[rel - 1])];
        m.image_bytes.resize(kMomentImageBytes);
        std::copy(cur.left.begin(), cur.left.end(), m.image_bytes.begin());
        std::copy(cur.right.begin(), cur.right.end(), m.image_bytes.begin() + kImageBytes);
        std::copy(prev.left.begin(), prev.left.end(), m.image_bytes.begin() + 2 * kImageBytes);
        std::copy(prev.right.begin(), prev.right.end(), m.image_bytes.begin() + 3 * kImageBytes);
        out.moments.push_back(std::move(m));
        ++rep.emitted;
    }
    if (report) *report = rep;
    return out;
}

// ---------------------------------------------------------------------------
// Balancing and splitting

Dataset balance_by_mode(const Dataset& ds, std::uint64_t seed) {
    const auto counts = ds.mode_counts();
    for (std::size_t m = 0; m < 3; ++m)
        if (counts[m] == 0)
            throw DataError(std::string("balance_by_mode: mode '") +
                            model::mode_name(static_cast<model::BehavioralMode>(m)) + "' absent");
    const std::size_t target = *std::min_element(counts.begin(), counts.end());

    Rng rng(seed);
    std::vector<bool> keep(ds.size(), false);
    for (std::size_t m = 0; m < 3; ++m) {
        std::vector<std::size_t> idx;
        idx.reserve(counts[m]);
        for (std::size_t i = 0; i < ds.size(); ++i)
            if (static_cast<std::size_t>(ds.moments[i].behavioral) == m) idx.push_back(i);
        rng.shuffle(idx);
        for (std::size_t k = 0; k < target; ++k) keep[idx[k]] = true;
    }
    Dataset out;
    out.moments.reserve(3 * target);
    for (std::size_t i = 0; i < ds.size(); ++i)
        if (keep[i]) out.moments.push_back(ds.moments[i]);
    return out;
}

SplitResult split(const Dataset& ds, double validation_fraction, std::uint64_t seed) {
    if (!(validation_fraction > 0.0 && validation_fraction < 1.0))
        throw DataError("split: validation fraction must be in (0,1)");
    if (ds.size() == 0) throw DataError("split: empty dataset");

    Rng rng(seed);
    std::vector<bool> to_val(ds.size(), false);
    const auto counts = ds.mode_counts();
    for (std::size_t m = 0; m < 3; ++m) {
        if (counts[m] == 0) continue; // stratify over the modes present
        std::vector<std::size_t> idx;
        idx.reserve(counts[m]);
        for (std::size_t i = 0; i < ds.size(); ++i)
            if (static_cast<std::size_t>(ds.moments[i].behavioral) == m) idx.push_back(i);
        std::size_t n_val = static_cast<std::size_t>(std::llround(validation_fraction * static_cast<double>(counts[m])));
        if (n_val == 0) n_val = 1;
        if (n_val >= counts[m])
            throw DataError(std::string("split: mode '") + model::mode_name(static_cast<model::BehavioralMode>(m)) +
                            "' stratum too small (" + std::to_string(counts[m]) + " moments) to split");
        rng.shuffle(idx);
        for (std::size_t k = 0; k < n_val; ++k) to_val[idx[k]] = true;
    }
    SplitResult out;
    for (std::size_t i = 0; i < ds.size(); ++i) {
        if (to_val[i])
            out.validation.moments.push_back(ds.moments[i]);
        else
            out.train.moments.push_back(ds.moments[i]);
    }
    return out;
}

MixReport mix_report(const Dataset& ds) {
    const auto c = ds.op_counts();
    const std::size_t expert = c[static_cast<std::size_t>(OperationalMode::Expert)];
    const std::size_t corr = c[static_cast<std::size_t>(OperationalMode::Correctional)];
    MixReport r;
    if (expert + corr == 0) return r;
    const double total = static_cast<double>(expert + corr);
    r.expert_fraction = static_cast<double>(expert) / total;
    r.correctional_fraction = static_cast<double>(corr) / total;
    return r;
}

// ---------------------------------------------------------------------------
// Codec

namespace {
constexpr char kDatasetMagic[4] = {'M', 'N', 'D', 'M'};
constexpr std::uint16_t kDatasetVersion = 1;
} // namespace

std::vector<std::uint8_t> serialize_bytes(const Dataset& ds) {
    std::ostringstream os(std::ios::binary);
    os.write(kDatasetMagic, 4);
    binio::write_le(os, kDatasetVersion);
    binio::write_le(os, static_cast<std::uint64_t>(ds.size()));
    for (const DataMoment& m : ds.moments) {
        if (m.image_bytes.size() != kMomentImageBytes)
            throw DataError("serialize: moment image block has wrong size");
        binio::write_le(os, static_cast<std::uint8_t>(m.behavioral));
        binio::write_le(os, static_cast<std::uint8_t>(m.operational));
        binio::write_le(os, m.timestamp_ms);
        os.write(reinterpret_cast<const char*>(m.image_bytes.data()),
                 static_cast<std::streamsize>(m.image_bytes.size()));
        for (std::size_t t = 0; t < nn::kTrajectorySteps; ++t)
            binio::write_f32(os, static_cast<float>(m.labels.steer[t]));
        for (std::size_t t = 0; t < nn::kTrajectorySteps; ++t)
            binio::write_f32(os, static_cast<float>(m.labels.motor[t]));
    }
    const std::string s = os.str();
    return std::vector<std::uint8_t>(s.begin(), s.end());
}

Dataset deserialize_bytes(const std::vector<std::uint8_t>& bytes) {
    std::istringstream is(std::string(bytes.begin(), bytes.end()), std::ios::binary);
    char magic[4];
    if (!is.read(magic, 4) || std::memcmp(magic, kDatasetMagic, 4) != 0)
        throw DataError("dataset: bad magic bytes (not an MNDM file)");
    const auto version = binio::read_le_or_throw<std::uint16_t>(is, "dataset version");
    if (version != kDatasetVersion)
        throw DataError("dataset: unsupported version " + std::to_string(version));
    const auto count = binio::read_le_or_throw<std::uint64_t>(is, "moment count");

    Dataset ds;
    ds.moments.reserve(count);
    for (std::uint64_t i = 0; i < count; ++i) {
        const std::string where = "record " + std::to_string(i) + " of " + std::to_string(count);
        DataMoment m;
        std::uint8_t beh, op;
        if (!binio::read_le(is, beh) || !binio::read_le(is, op))
            throw DataError("dataset: truncated file at " + where);
        if (beh > 2) throw DataError("dataset: invalid behavioral mode " + std::to_string(beh) + " in " + where);
        if (op > 2) throw DataError("dataset: invalid operational mode " + std::to_string(op) + " in " + where);
        m.behavioral = static_cast<model::BehavioralMode>(beh);
        m.operational = static_cast<OperationalMode>(op);
        if (!binio::read_le(is, m.timestamp_ms)) throw DataError("dataset: truncated file at " + where);
        m.image_bytes.resize(kMomentImageBytes);
        if (!is.read(reinterpret_cast<char*>(m.image_bytes.data()),
                     static_cast<std::streamsize>(kMomentImageBytes)))
            throw DataError("dataset: truncated image block at " + where);
        for (std::size_t t = 0; t < 2 * nn::kTrajectorySteps; ++t) {
            float v;
            if (!binio::read_f32(is, v)) throw DataError("dataset: truncated labels at " + where);
            if (!(v >= 0.0f && v <= 1.0f))
                throw DataError("dataset: label outside [0,1] at " + where);
            if (t < nn::kTrajectorySteps)
                m.labels.steer[t] = v;
            else
                m.labels.motor[t - nn::kTrajectorySteps] = v;
        }
        ds.moments.push_back(std::move(m));
    }
    char extra;
    if (is.read(&extra, 1)) throw DataError("dataset: trailing bytes after last record");
    return ds;
}

void serialize(const Dataset& ds, const std::filesystem::path& path) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("dataset: cannot open for writing: " + path.string());
    const std::vector<std::uint8_t> bytes = serialize_bytes(ds);
    f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw IoError("dataset: write failed: " + path.string());
}

Dataset deserialize(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("dataset: cannot open: " + path.string());
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    return deserialize_bytes(bytes);
}

} // namespace multinet::data
