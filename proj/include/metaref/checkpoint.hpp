// Licensed under the Apache License, Version 2.0 (the "License"); you
// may not use this file except in compliance with the License.  You
// may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or
// implied. See the License for the specific language governing
// permissions and limitations under the License.

#pragma once

#include <string>
#include <vector>

#include "metaref/csvio.hpp"
#include "metaref/errors.hpp"
#include "metaref/nets.hpp"
#include "metaref/training.hpp"

namespace metaref {

// A trained state bundle: predictor, referee, the frozen benchmark, and
// the schedule position reached during training. Everything fine_tune
// needs to adapt the predictor to a new task.
struct Checkpoint {
    std::string method;
    ModelParams model;
    RefereeParams referee;
    GlobalMetric m_hat;
    long long t_final = 0;
    RateSchedule schedule;
};

inline Checkpoint make_checkpoint(const std::string& method, const TrainResult& r,
                                  const RateSchedule& schedule) {
    Checkpoint c;
    c.method = method;
    c.model = r.model;
    c.referee = r.referee;
    c.m_hat = r.m_hat;
    c.t_final = r.t_final;
    c.schedule = schedule;
    return c;
}

namespace detail {

inline void append_tensor_section(std::string& out, const std::string& name, const Tensor& t) {
    out += name;
    out += ' ';
    out += std::to_string(t.rows());
    out += ' ';
    out += std::to_string(t.cols());
    out += '\n';
    for (int r = 0; r < t.rows(); ++r) {
        for (int c = 0; c < t.cols(); ++c) {
            if (c > 0) out += ' ';
            out += format_hex(t.at(r, c));
        }
        out += '\n';
    }
}

// Shapes come from a throwaway init so the expected layout has a single
// source of truth.
inline std::vector<Tensor> reference_shapes(const NetSpec& spec) {
    Rng rng = Rng::stream(0, 0, 0);
    return init_model(spec, rng).tensors;
}

inline std::vector<Tensor> reference_shapes(const RefereeSpec& spec) {
    Rng rng = Rng::stream(0, 0, 0);
    return init_referee(spec, rng).tensors;
}

class CheckpointReader {
public:
    CheckpointReader(const std::string& path, std::vector<std::string> lines)
        : path_(path), lines_(std::move(lines)) {}

    std::string next() {
        if (pos_ >= lines_.size()) fail("unexpected end of file");
        return lines_[pos_++];
    }

    std::vector<std::string> next_fields(const std::string& key, size_t n_values) {
        std::vector<std::string> fields = split_ws(next());
        if (fields.empty() || fields[0] != key)
            fail("expected '" + key + "' record");
        if (fields.size() != n_values + 1)
            fail("'" + key + "' needs " + std::to_string(n_values) + " value(s)");
        return fields;
    }

    [[noreturn]] void fail(const std::string& msg) const {
        throw ValidationError(path_ + ":" + std::to_string(pos_) + ": " + msg);
    }

    std::string where() const { return path_ + ":" + std::to_string(pos_); }

    static std::vector<std::string> split_ws(const std::string& line) {
        std::vector<std::string> out;
        std::string cur;
        for (char ch : line) {
            if (ch == ' ' || ch == '\t') {
                if (!cur.empty()) out.push_back(cur);
                cur.clear();
            } else {
                cur += ch;
            }
        }
        if (!cur.empty()) out.push_back(cur);
        return out;
    }

private:
    std::string path_;
    std::vector<std::string> lines_;
    size_t pos_ = 0;
};

inline std::vector<Tensor> read_tensor_block(CheckpointReader& in, const std::string& section,
                                             const std::vector<std::string>& names,
                                             const std::vector<Tensor>& shapes) {
    std::vector<std::string> head = in.next_fields(section, 1);
    const long long count = parse_int(head[1], in.where());
    if (count != static_cast<long long>(names.size()))
        in.fail(section + ": expected " + std::to_string(names.size()) + " tensors, file has " +
                std::to_string(count));
    std::vector<Tensor> tensors;
    tensors.reserve(names.size());
    for (size_t i = 0; i < names.size(); ++i) {
        std::vector<std::string> hdr = in.next_fields(names[i], 2);
        const long long rows = parse_int(hdr[1], in.where());
        const long long cols = parse_int(hdr[2], in.where());
        if (rows != shapes[i].rows() || cols != shapes[i].cols())
            in.fail(names[i] + ": shape " + std::to_string(rows) + "x" + std::to_string(cols) +
                    " does not match spec " + std::to_string(shapes[i].rows()) + "x" +
                    std::to_string(shapes[i].cols()));
        Tensor t(static_cast<int>(rows), static_cast<int>(cols));
        for (int r = 0; r < t.rows(); ++r) {
            std::vector<std::string> vals = CheckpointReader::split_ws(in.next());
            if (vals.size() != static_cast<size_t>(t.cols()))
                in.fail(names[i] + ": row " + std::to_string(r) + " has " +
                        std::to_string(vals.size()) + " values, expected " +
                        std::to_string(t.cols()));
            for (int c = 0; c < t.cols(); ++c) t.at(r, c) = parse_hex(vals[c], in.where());
        }
        tensors.push_back(std::move(t));
    }
    return tensors;
}

} // namespace detail

inline std::string checkpoint_to_text(const Checkpoint& ckpt) {
    const NetSpec& n = ckpt.model.spec;
    const RefereeSpec& r = ckpt.referee.spec;
    std::string out = "MRCKPT 1\n";
    out += "method " + ckpt.method + "\n";
    out += "problem " + problem_name(n.problem) + "\n";
    out += "net " + std::to_string(n.feature_dim) + " " + std::to_string(n.width) + " " +
           std::to_string(n.embed_dim) + " " + std::to_string(n.enc_layers) + " " +
           std::to_string(n.dec_layers) + " " + std::to_string(n.n_classes) + "\n";
    out += "referee " + std::to_string(r.embed_dim) + " " + std::to_string(r.hidden) + " " +
           std::to_string(r.hidden_layers) + "\n";
    out += "m_hat " + format_hex(ckpt.m_hat.m_hat) + " " +
           std::to_string(ckpt.m_hat.sample_count) + "\n";
    out += "t_final " + std::to_string(ckpt.t_final) + "\n";
    out += "beta0 " + format_hex(ckpt.schedule.beta0) + "\n";
    out += "rho " + format_hex(ckpt.schedule.rho) + "\n";

    const std::vector<std::string> model_names = model_param_names(n);
    out += "model " + std::to_string(model_names.size()) + "\n";
    for (size_t i = 0; i < model_names.size(); ++i)
        detail::append_tensor_section(out, model_names[i], ckpt.model.tensors[i]);

    const std::vector<std::string> ref_names = referee_param_names(r);
    out += "referee_params " + std::to_string(ref_names.size()) + "\n";
    for (size_t i = 0; i < ref_names.size(); ++i)
        detail::append_tensor_section(out, ref_names[i], ckpt.referee.tensors[i]);

    out += "end\n";
    return out;
}

inline void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
    write_text(path, checkpoint_to_text(ckpt));
}

inline Checkpoint load_checkpoint(const std::string& path) {
    detail::CheckpointReader in(path, read_lines(path));
    if (in.next() != "MRCKPT 1") in.fail("not a checkpoint file (missing 'MRCKPT 1' header)");

    Checkpoint ckpt;
    ckpt.method = in.next_fields("method", 1)[1];

    std::vector<std::string> p = in.next_fields("problem", 1);
    NetSpec net;
    try {
        net.problem = parse_problem(p[1]);
    } catch (const ValidationError& e) {
        in.fail(e.what());
    }

    std::vector<std::string> nf = in.next_fields("net", 6);
    net.feature_dim = static_cast<int>(parse_int(nf[1], in.where()));
    net.width = static_cast<int>(parse_int(nf[2], in.where()));
    net.embed_dim = static_cast<int>(parse_int(nf[3], in.where()));
    net.enc_layers = static_cast<int>(parse_int(nf[4], in.where()));
    net.dec_layers = static_cast<int>(parse_int(nf[5], in.where()));
    net.n_classes = static_cast<int>(parse_int(nf[6], in.where()));
    net.validate();

    std::vector<std::string> rf = in.next_fields("referee", 3);
    RefereeSpec ref;
    ref.embed_dim = static_cast<int>(parse_int(rf[1], in.where()));
    ref.hidden = static_cast<int>(parse_int(rf[2], in.where()));
    ref.hidden_layers = static_cast<int>(parse_int(rf[3], in.where()));
    ref.validate();

    std::vector<std::string> mh = in.next_fields("m_hat", 2);
    ckpt.m_hat.m_hat = parse_hex(mh[1], in.where());
    ckpt.m_hat.sample_count = parse_int(mh[2], in.where());

    ckpt.t_final = parse_int(in.next_fields("t_final", 1)[1], in.where());
    ckpt.schedule.beta0 = parse_hex(in.next_fields("beta0", 1)[1], in.where());
    ckpt.schedule.rho = parse_hex(in.next_fields("rho", 1)[1], in.where());
    ckpt.schedule.validate();

    ckpt.model.spec = net;
    ckpt.model.tensors = detail::read_tensor_block(in, "model", model_param_names(net),
                                                   detail::reference_shapes(net));
    ckpt.referee.spec = ref;
    ckpt.referee.tensors = detail::read_tensor_block(in, "referee_params",
                                                     referee_param_names(ref),
                                                     detail::reference_shapes(ref));
    if (in.next() != "end") in.fail("expected 'end'");
    return ckpt;
}

} // namespace metaref
