// Copyright 2026 The etrace-ibt Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include <chrono>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>

#include "etrace/pipeline.hpp"
#include "etrace/socket.hpp"
#include "etrace/workload.hpp"

using namespace etrace;

namespace
{
  std::string readFile(const std::string& path)
  {
    std::ifstream f(path, std::ios::binary);
    if (not f)
      throw Error(Errc::IoError, "cannot open '" + path + "'");
    std::ostringstream s;
    s << f.rdbuf();
    return s.str();
  }

  void writeFile(const std::string& path, std::string_view text)
  {
    std::ofstream f(path, std::ios::binary);
    f.write(text.data(), static_cast<std::streamsize>(text.size()));
    f.close();
    if (not f)
      throw Error(Errc::SinkError, "cannot write '" + path + "'");
  }

  std::vector<uint8_t> bytesOf(const std::string& s)
  { return {s.begin(), s.end()}; }

  struct ConfigFlags
  {
    std::string file;
    std::vector<std::pair<std::string, std::string>> overrides;

    void attach(CLI::App* cmd)
    {
      cmd->add_option("--config", file, "Encoder config file (key=value)");
      for (const char* key : {"enabled", "priv_allow", "addr_ranges", "resync_mode", "resync_threshold"})
        {
          std::string flag = std::string("--") + key;
          std::replace(flag.begin(), flag.end(), '_', '-');
          cmd->add_option_function<std::string>(
            flag, [this, key](const std::string& v) { overrides.emplace_back(key, v); },
            std::string("Override config key ") + key);
        }
    }

    EncoderConfig load(unsigned lanes) const
    {
      EncoderConfig c = file.empty() ? EncoderConfig{} : parseEncoderConfig(readFile(file));
      if (lanes)
        c.lanes = lanes;
      for (const auto& [k, v] : overrides)
        setConfigKey(c, k, v);
      c.validate();
      return c;
    }
  };

  void addWorkloadFlags(CLI::App* cmd, WorkloadParams& p)
  {
    cmd->add_option("--seed", p.seed, "Generator seed");
    cmd->add_option("--instructions", p.instructionCount, "Retired instruction target");
    cmd->add_option("--branch-density", p.branchDensity, "Share of branches")->check(CLI::Range(0.0, 1.0));
    cmd->add_option("--jump-density", p.jumpDensity, "Share of jumps")->check(CLI::Range(0.0, 1.0));
    cmd->add_option("--uninferable-fraction", p.uninferableFraction, "Share of jumps with register targets")
      ->check(CLI::Range(0.0, 1.0));
    cmd->add_option("--trap-rate", p.trapRate, "Traps per 10^4 instructions");
    cmd->add_option("--loop-bias", p.loopBias, "Probability a branch goes backward")->check(CLI::Range(0.0, 1.0));
  }

  // Append the lines of `extra` whose keys `base` lacks.
  std::string mergeReports(std::string base, std::string_view extra)
  {
    std::istringstream lines{std::string(extra)};
    for (std::string line; std::getline(lines, line);)
      if (base.find("\n" + line.substr(0, line.find('=') + 1)) == std::string::npos
          and base.rfind(line.substr(0, line.find('=') + 1), 0) != 0)
        base += line + "\n";
    return base;
  }

  void emitReport(const std::string& path, const std::string& text)
  {
    if (path.empty())
      std::cout << text;
    else
      writeFile(path, text);
  }
}

int main(int argc, char** argv)
{
  CLI::App app{"RISC-V instruction branch trace encoder, decoder and harness"};
  app.require_subcommand(1);

  WorkloadParams params;
  unsigned lanes = 0;
  ConfigFlags config;
  std::string mapPath, logPath, inPath, outPath, reportPath, endpoint;
  size_t fifoCapacity = kDefaultFifoCapacity;
  bool lossless = false;
  size_t drainPerCycle = 1;
  unsigned timeoutMs = 5000;

  auto* gen = app.add_subcommand("gen", "Generate a workload map and retirement log");
  addWorkloadFlags(gen, params);
  gen->add_option("--lanes", lanes, "Retirement lanes");
  gen->add_option("--map", mapPath, "Map output")->required();
  gen->add_option("--log", logPath, "Log output")->required();

  auto* encode = app.add_subcommand("encode", "Encode a retirement log into a stream file");
  encode->add_option("--log", logPath, "Retirement log")->required();
  encode->add_option("--map", mapPath, "Instruction map")->required();
  encode->add_option("--out", outPath, "Stream output")->required();
  encode->add_option("--lanes", lanes, "Retirement lanes");
  encode->add_option("--fifo-capacity", fifoCapacity, "Output FIFO depth in frames")
    ->capture_default_str()->check(CLI::PositiveNumber);
  encode->add_option("--drain", drainPerCycle, "Frames the link moves per cycle")->capture_default_str();
  encode->add_flag("--lossless", lossless, "Unbounded output FIFO")->excludes("--fifo-capacity");
  encode->add_option("--report", reportPath, "Report output");
  config.attach(encode);

  auto* decode = app.add_subcommand("decode", "Decode a stream file into PCs");
  decode->add_option("--in", inPath, "Stream input")->required();
  decode->add_option("--map", mapPath, "Instruction map")->required();
  decode->add_option("--out", outPath, "PC output, one hex address per line");
  decode->add_option("--report", reportPath, "Report output");

  auto* roundtrip = app.add_subcommand("roundtrip", "Generate or load, encode, decode and verify");
  addWorkloadFlags(roundtrip, params);
  roundtrip->add_option("--lanes", lanes, "Retirement lanes");
  roundtrip->add_option("--log", logPath, "Use this retirement log instead of generating");
  roundtrip->add_option("--map", mapPath, "Instruction map for --log")->needs("--log");
  roundtrip->get_option("--log")->needs("--map");
  roundtrip->add_option("--fifo-capacity", fifoCapacity, "Output FIFO depth in frames")
    ->capture_default_str()->check(CLI::PositiveNumber);
  roundtrip->add_option("--drain", drainPerCycle, "Frames the link moves per cycle")->capture_default_str();
  roundtrip->add_flag("--lossless", lossless, "Unbounded output FIFO")->excludes("--fifo-capacity");
  roundtrip->add_option("--out", outPath, "Also persist the stream");
  roundtrip->add_option("--report", reportPath, "Report output");
  config.attach(roundtrip);

  auto* collect = app.add_subcommand("collect", "Receive one framed stream over TCP");
  collect->add_option("--listen", endpoint, "HOST:PORT")->required();
  collect->add_option("--out", outPath, "Stream output")->required();
  collect->add_option("--timeout", timeoutMs, "Milliseconds to wait for data");

  auto* send = app.add_subcommand("send", "Send a stream file over TCP");
  send->add_option("--in", inPath, "Stream input")->required();
  send->add_option("--to", endpoint, "HOST:PORT")->required();

  CLI11_PARSE(app, argc, argv);

  try
    {
      if (*gen)
        {
          params.lanes = lanes ? lanes : 1;
          auto w = generateWorkload(params);
          writeFile(mapPath, formatInstructionMap(w.map));
          writeFile(logPath, formatRetirementLog(w.blocks));
        }
      else if (*encode)
        {
          auto map = parseInstructionMap(readFile(mapPath));
          auto blocks = parseRetirementLog(readFile(logPath));
          EncodeOptions o;
          o.config = config.load(lanes);
          if (not lossless)
            o.fifoCapacity = fifoCapacity;
          o.drainPerCycle = drainPerCycle;
          auto expected = expectedTrace(map, blocks, o.config);
          auto enc = encodeThroughLink(blocks, o);
          auto stream = frameStream(enc.delivered);
          writeFile(outPath, {reinterpret_cast<const char*>(stream.data()), stream.size()});
          auto report = computeCompression(expected.retired, stream.size(), enc.delivered, enc.fifoLossEvents);
          emitReport(reportPath, report.toText());
        }
      else if (*decode)
        {
          auto map = parseInstructionMap(readFile(mapPath));
          auto stream = bytesOf(readFile(inPath));
          auto packets = decodePayloads(readStream(stream));
          auto d = decodeStream(packets, map);
          if (not outPath.empty())
            {
              std::string text;
              for (auto pc : d.pcs)
                text += detail::hex(pc) + "\n";
              writeFile(outPath, text);
            }
          std::string text;
          if (not d.pcs.empty())
            text = computeCompression(d.pcs.size(), stream.size(), packets, d.report.lossEvents).toText();
          emitReport(reportPath, mergeReports(text, d.report.toText()));
        }
      else if (*roundtrip)
        {
          Workload w;
          if (logPath.empty())
            {
              params.lanes = lanes ? lanes : 1;
              w = generateWorkload(params);
            }
          else
            {
              w.map = parseInstructionMap(readFile(mapPath));
              w.blocks = parseRetirementLog(readFile(logPath));
            }
          EncodeOptions o;
          o.config = config.load(lanes ? lanes : params.lanes);
          if (not lossless)
            o.fifoCapacity = fifoCapacity;
          o.drainPerCycle = drainPerCycle;
          auto r = runRoundTrip(w.map, w.blocks, o);
          if (not outPath.empty())
            writeFile(outPath, {reinterpret_cast<const char*>(r.stream.data()), r.stream.size()});
          emitReport(reportPath, mergeReports(r.report.toText(), r.decodeReport.toText()));
        }
      else if (*collect)
        {
          std::ofstream sink(outPath, std::ios::binary);
          if (not sink)
            throw Error(Errc::SinkError, "cannot write '" + outPath + "'");
          size_t frames = serveCollector(parseEndpoint(endpoint), sink, std::chrono::milliseconds(timeoutMs));
          std::cerr << "collected " << frames << " frames\n";
        }
      else if (*send)
        {
          auto stream = bytesOf(readFile(inPath));
          size_t frames = sendFrames(parseEndpoint(endpoint), readStream(stream));
          std::cerr << "sent " << frames << " frames\n";
        }
    }
  catch (const Error& e)
    {
      std::cerr << "etrace: " << e.what() << "\n";
      return 1;
    }
  catch (const std::exception& e)
    {
      std::cerr << "etrace: " << e.what() << "\n";
      return 1;
    }
  return 0;
}
