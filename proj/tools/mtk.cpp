// mtk: small neural machine translation toolkit
//
// Subcommands: vocab, train, translate, score, rescore.
// Exit codes: 0 success, 1 usage error, 2 data/io error, 3 numeric error.

#include "CLI11.hpp"

#include "mtk/config.h"
#include "mtk/search.h"
#include "mtk/train.h"

#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>

using namespace mtk;

namespace {

uint64_t defaultSeed() {
  const char* s = std::getenv("MTK_SEED");
  if(!s)
    return 1;
  try {
    return (uint64_t)std::stoull(s);
  } catch(const std::exception&) {
    throw DataError(std::string("MTK_SEED is not an integer: ") + s);
  }
}

std::vector<std::string> splitWs(const std::string& s) {
  std::istringstream in(s);
  std::vector<std::string> out;
  std::string tok;
  while(in >> tok)
    out.push_back(tok);
  return out;
}

// ----------------------------------------------------------- arguments

struct VocabArgs {
  std::vector<std::string> corpora;
  std::string output;
  int64_t maxSize = 32000;
};

struct TrainArgs {
  std::string modelPath;
  std::vector<std::string> trainSets;  // sources..., target
  std::vector<std::string> vocabs;     // sources..., target
  std::string arch = "s2s-shallow";
  std::string customEncoders, customDecoder;
  int64_t embDim = 64, stateDim = 128;
  int64_t heads = 4, layers = 2;
  double dropout = 0.1;
  std::string tying = "none";
  bool layerNorm = false, rightLeft = false, postNorm = false;
  int64_t epochs = 1, maxUpdates = -1;
  int64_t miniBatchTokens = 256;
  int64_t workers = 1;
  bool async = false;
  double lrBase = 0.0003;
  int64_t warmup = 16000;
  double averageBeta = 0.9999;
  int64_t saveEvery = 0;
  std::string resume;
  int64_t logEvery = 100;
  bool quiet = false;
  int64_t seed = -1;  // -1: use MTK_SEED / 1
};

struct TranslateArgs {
  std::vector<std::string> models;
  std::vector<std::string> vocabs;  // sources..., target
  std::vector<std::string> inputs;  // one per source stream
  std::string output = "-";
  std::string nBestFile;
  int64_t beamSize = 5;
  double alpha = 0.6;
  int64_t nBest = 1;
  int64_t miniBatchTokens = 512;
  int64_t maxLengthFactor = 3;
};

struct ScoreArgs {
  std::string model;
  std::vector<std::string> vocabs;  // sources..., target
  std::vector<std::string> inputs;  // sources..., target
  std::string output = "-";
  int64_t miniBatchTokens = 512;
};

struct RescoreArgs {
  std::string nBestIn;
  std::vector<std::string> models;  // additional scorers
  std::vector<std::string> vocabs;  // sources..., target
  std::vector<std::string> inputs;  // one per source stream
  std::vector<std::string> weightSpecs;  // name=value
  std::string output = "-";
  double alpha = 0.6;
  int64_t miniBatchTokens = 512;
};

// ------------------------------------------------------------- helpers

std::vector<Vocabulary> loadVocabs(const std::vector<std::string>& paths) {
  std::vector<Vocabulary> out;
  for(auto& p : paths)
    out.push_back(Vocabulary::load(p));
  return out;
}

std::ostream& openOutput(const std::string& path, std::ofstream& file) {
  if(path == "-" || path.empty())
    return std::cout;
  file.open(path);
  if(!file)
    throw IoError("cannot write output file: " + path);
  return file;
}

struct LoadedModel {
  std::unique_ptr<ExpressionGraph> graph;
  Model model;
};

LoadedModel loadOne(const std::string& path) {
  LoadedModel lm;
  lm.graph = std::make_unique<ExpressionGraph>(1, /*inference=*/true);
  lm.model = loadModel(path, *lm.graph);
  return lm;
}

std::vector<Example> readSources(const std::vector<std::string>& inputs,
                                 const std::vector<Vocabulary>& vocabs) {
  std::vector<const Vocabulary*> srcV;
  for(size_t i = 0; i < inputs.size(); ++i)
    srcV.push_back(&vocabs[i]);
  std::vector<std::vector<std::string>> streams;
  for(auto& p : inputs)
    streams.push_back(readLines(p));
  size_t n = streams[0].size();
  for(auto& s : streams)
    if(s.size() != n)
      throw DataError("source files have different line counts");
  std::vector<Example> out(n);
  for(size_t i = 0; i < n; ++i) {
    for(size_t s = 0; s < streams.size(); ++s)
      out[i].sources.push_back(srcV[s]->encode(streams[s][i]));
    out[i].id = i;
  }
  return out;
}

// ---------------------------------------------------------- subcommands

int runVocab(const VocabArgs& a) {
  Vocabulary v = Vocabulary::build(a.corpora, (size_t)a.maxSize);
  v.save(a.output);
  std::cerr << "built vocabulary of " << v.size() << " tokens\n";
  return 0;
}

int runTrain(const TrainArgs& a) {
  if(a.trainSets.size() < 2)
    throw DataError("--train-sets needs at least one source file and one target file");
  if(a.vocabs.size() != a.trainSets.size())
    throw DataError("--vocabs must list one vocabulary per training file");
  size_t streams = a.trainSets.size() - 1;

  auto vocabs = loadVocabs(a.vocabs);
  std::vector<const Vocabulary*> srcV;
  std::vector<std::string> srcPaths;
  for(size_t i = 0; i < streams; ++i) {
    srcV.push_back(&vocabs[i]);
    srcPaths.push_back(a.trainSets[i]);
    if(vocabs[i].size() != vocabs[0].size())
      throw DataError("all source vocabularies must have the same size");
  }
  auto data = readParallelCorpus(srcPaths, a.trainSets.back(), srcV, &vocabs.back());
  if(a.rightLeft)
    for(auto& ex : data)
      ex.target = invertR2l(ex.target);

  ModelConfig cfg;
  cfg.architecture = a.arch;
  cfg.encoderKind = a.customEncoders;
  cfg.decoderKind = a.customDecoder;
  cfg.sourceVocab = vocabs[0].size();
  cfg.targetVocab = vocabs.back().size();
  cfg.embDim = a.embDim;
  cfg.stateDim = a.stateDim;
  cfg.heads = (int)a.heads;
  cfg.layers = (int)a.layers;
  cfg.dropout = (Real)a.dropout;
  cfg.tying = a.tying;
  cfg.layerNorm = a.layerNorm;
  cfg.rightLeft = a.rightLeft;
  cfg.postNorm = a.postNorm;
  cfg.sourceArity = (int)streams;

  uint64_t seed = a.seed >= 0 ? (uint64_t)a.seed : defaultSeed();
  Model model = buildModel(cfg);
  ExpressionGraph master(seed);
  Adam adam(adamDefaultsFor(cfg));
  AveragedParameters average((Real)a.averageBeta);

  TrainOptions opts;
  opts.workers = (int)a.workers;
  opts.async = a.async;
  opts.tokenBudget = a.miniBatchTokens;
  opts.seed = seed;
  opts.epochs = a.epochs;
  opts.maxUpdates = a.maxUpdates;
  opts.lr.base = (Real)a.lrBase;
  opts.lr.warmup = a.warmup;
  opts.averageBeta = (Real)a.averageBeta;
  opts.checkpointPath = a.saveEvery > 0 ? a.modelPath + ".ckpt" : "";
  opts.checkpointEvery = a.saveEvery;
  opts.resumeFrom = a.resume;
  opts.logEvery = a.quiet ? 0 : a.logEvery;
  opts.log = a.quiet ? nullptr : &std::cerr;

  TrainResult res = train(model, data, master, adam, average, opts);
  saveModel(a.modelPath, cfg, master);
  if(!average.empty()) {
    ExpressionGraph avgGraph(seed);
    model.registerParams(avgGraph);
    for(auto& name : master.paramNames())
      avgGraph.paramValue(name).copyFrom(master.paramValue(name));
    average.applyTo(avgGraph);
    saveModel(a.modelPath + ".avg", cfg, avgGraph);
  }
  if(!a.quiet)
    std::cerr << "finished: updates=" << res.updates << " epochs=" << res.epochs
              << " loss=" << res.finalLoss << "\n";
  return 0;
}

int runTranslate(const TranslateArgs& a) {
  if(a.models.empty())
    throw DataError("--models needs at least one model file");
  std::vector<LoadedModel> loaded;
  for(auto& p : a.models)
    loaded.push_back(loadOne(p));
  const ModelConfig& c0 = loaded[0].model.config;
  for(auto& lm : loaded) {
    if(lm.model.config.targetVocab != c0.targetVocab)
      throw DataError("ensemble members disagree on the target vocabulary size");
    if(lm.model.config.rightLeft != c0.rightLeft)
      throw DataError("cannot ensemble left-to-right and right-to-left models");
    if(lm.model.config.sourceArity != c0.sourceArity)
      throw DataError("ensemble members disagree on the number of source streams");
  }
  if((int64_t)a.inputs.size() != (int64_t)c0.sourceArity)
    throw DataError("expected " + std::to_string(c0.sourceArity) + " input file(s)");
  if(a.vocabs.size() != a.inputs.size() + 1)
    throw DataError("--vocabs must list the source vocabularies plus the target vocabulary");

  auto vocabs = loadVocabs(a.vocabs);
  std::vector<Scorer> scorers;
  for(size_t i = 0; i < loaded.size(); ++i)
    scorers.push_back({"F" + std::to_string(i), &loaded[i].model, loaded[i].graph.get()});

  std::vector<std::vector<std::string>> streams;
  for(auto& p : a.inputs)
    streams.push_back(readLines(p));
  std::vector<Vocabulary> srcVocabs(vocabs.begin(), vocabs.end() - 1);

  TranslateOptions opts;
  opts.beamSize = (int)a.beamSize;
  opts.alpha = a.alpha;
  opts.nBest = (int)a.nBest;
  opts.maxLengthFactor = a.maxLengthFactor;
  opts.tokenBudget = a.miniBatchTokens;

  TranslateOutput result = translateLines(scorers, vocabs.back(), streams, srcVocabs, opts);

  std::ofstream file;
  std::ostream& out = openOutput(a.output, file);
  for(auto& line : result.best)
    out << line << "\n";
  if(!a.nBestFile.empty()) {
    std::ofstream nb(a.nBestFile);
    if(!nb)
      throw IoError("cannot write n-best file: " + a.nBestFile);
    for(auto& line : result.nbestLines)
      nb << line << "\n";
  }
  std::cerr << "translated " << result.best.size() << " sentences, " << std::fixed
            << std::setprecision(1) << result.wordsPerSecond << " words/s\n";
  return 0;
}

int runScore(const ScoreArgs& a) {
  LoadedModel lm = loadOne(a.model);
  const ModelConfig& cfg = lm.model.config;
  if((int64_t)a.inputs.size() != (int64_t)cfg.sourceArity + 1)
    throw DataError("expected " + std::to_string(cfg.sourceArity) +
                    " source file(s) plus one target file");
  if(a.vocabs.size() != a.inputs.size())
    throw DataError("--vocabs must list one vocabulary per input file");
  auto vocabs = loadVocabs(a.vocabs);

  std::vector<const Vocabulary*> srcV;
  std::vector<std::string> srcPaths;
  for(size_t i = 0; i + 1 < a.inputs.size(); ++i) {
    srcV.push_back(&vocabs[i]);
    srcPaths.push_back(a.inputs[i]);
  }
  auto data = readParallelCorpus(srcPaths, a.inputs.back(), srcV, &vocabs.back());
  if(cfg.rightLeft)
    for(auto& ex : data)
      ex.target = invertR2l(ex.target);

  std::vector<Hypothesis> results(data.size());
  BatchOptions bo;
  bo.tokenBudget = a.miniBatchTokens;
  bo.shuffle = false;
  Scorer scorer{"F0", &lm.model, lm.graph.get()};
  for(auto& batch : makeBatches(data, bo)) {
    auto scored = scoreBatch(scorer, batch);
    for(size_t r = 0; r < scored.size(); ++r)
      results[batch.sentenceIds[r]] = std::move(scored[r]);
  }

  std::ofstream file;
  std::ostream& out = openOutput(a.output, file);
  out << std::fixed << std::setprecision(6);
  for(size_t i = 0; i < results.size(); ++i) {
    out << i << ' ' << results[i].score;
    for(double s : results[i].tokenScores)
      out << ' ' << s;
    out << "\n";
  }
  return 0;
}

int runRescore(const RescoreArgs& a) {
  if(a.vocabs.size() != a.inputs.size() + 1)
    throw DataError("--vocabs must list the source vocabularies plus the target vocabulary");
  auto vocabs = loadVocabs(a.vocabs);
  std::vector<Vocabulary> srcVocabs(vocabs.begin(), vocabs.end() - 1);
  const Vocabulary& tgtVocab = vocabs.back();
  auto sources = readSources(a.inputs, srcVocabs);

  // parse the incoming n-best list
  std::vector<std::vector<Hypothesis>> nbest(sources.size());
  for(auto& line : readLines(a.nBestIn)) {
    if(line.empty())
      continue;
    std::vector<std::string> fields;
    size_t pos = 0;
    while(true) {
      size_t sep = line.find(" ||| ", pos);
      if(sep == std::string::npos) {
        fields.push_back(line.substr(pos));
        break;
      }
      fields.push_back(line.substr(pos, sep - pos));
      pos = sep + 5;
    }
    if(fields.size() != 4)
      throw DataError("malformed n-best line: " + line);
    size_t id = (size_t)parseInt(fields[0], "n-best id");
    if(id >= nbest.size())
      throw DataError("n-best id " + fields[0] + " exceeds the source line count");
    Hypothesis h;
    h.tokens = tgtVocab.encode(fields[1]);
    h.tokens.push_back(Vocabulary::kEos);
    for(auto& comp : splitWs(fields[2])) {
      size_t eq = comp.find('=');
      if(eq == std::string::npos)
        throw DataError("malformed component score '" + comp + "' in: " + line);
      h.components.emplace_back(comp.substr(0, eq),
                                parseNumber(comp.substr(eq + 1), comp.substr(0, eq)));
    }
    h.score = parseNumber(fields[3], "n-best total");
    nbest[id].push_back(std::move(h));
  }

  std::vector<LoadedModel> loaded;
  for(auto& p : a.models)
    loaded.push_back(loadOne(p));
  for(size_t i = 0; i < loaded.size(); ++i)
    addComponentScores({"R" + std::to_string(i), &loaded[i].model, loaded[i].graph.get()},
                       sources, nbest, a.miniBatchTokens);

  std::map<std::string, double> weights;
  for(auto& spec : a.weightSpecs) {
    size_t eq = spec.find('=');
    if(eq == std::string::npos)
      throw DataError("--weight expects name=value, got '" + spec + "'");
    weights[spec.substr(0, eq)] = parseNumber(spec.substr(eq + 1), spec.substr(0, eq));
  }
  combineComponents(nbest, weights, a.alpha);

  std::ofstream file;
  std::ostream& out = openOutput(a.output, file);
  for(size_t i = 0; i < nbest.size(); ++i)
    for(auto& h : nbest[i]) {
      std::vector<int32_t> toks = h.tokens;
      if(!toks.empty() && toks.back() == Vocabulary::kEos)
        toks.pop_back();
      out << formatNBestLine(i, tgtVocab.decode(toks), h) << "\n";
    }
  return 0;
}

struct BleuArgs {
  std::string hypotheses;
  std::string references;
  int64_t maxN = 4;
};

int runBleu(const BleuArgs& a) {
  double bleu = corpusBleu(readLines(a.hypotheses), readLines(a.references), (int)a.maxN);
  std::cout << std::fixed << std::setprecision(6) << bleu << "\n";
  return 0;
}

// --------------------------------------------------- config file merging

// Expands "key: value" entries from --config into extra command-line
// tokens; explicit flags keep priority because existing tokens win.
void expandConfigFile(CLI::App* sub, std::vector<std::string>& args) {
  std::string path;
  for(size_t i = 0; i + 1 < args.size(); ++i)
    if(args[i] == "--config")
      path = args[i + 1];
  if(path.empty())
    return;
  for(auto& [key, value] : readConfigFile(path)) {
    std::string flag = "--" + key;
    CLI::Option* opt = sub->get_option_no_throw(flag);
    if(!opt || flag == "--config")
      throw DataError("unknown option '" + key + "' in config file " + path);
    bool given = false;
    for(auto& a : args)
      if(a == flag)
        given = true;
    if(given)
      continue;
    if(opt->get_expected_min() == 0) {  // boolean flag
      if(parseFlag(value, key))
        args.push_back(flag);
    } else {
      args.push_back(flag);
      for(auto& tok : splitWs(value))
        args.push_back(tok);
    }
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"mtk: neural machine translation toolkit"};
  app.require_subcommand(1);

  VocabArgs va;
  CLI::App* vocab = app.add_subcommand("vocab", "build a vocabulary from corpora");
  vocab->add_option("--corpus", va.corpora, "input text files")->required();
  vocab->add_option("--output", va.output, "vocabulary file to write")->required();
  vocab->add_option("--max-size", va.maxSize, "maximum vocabulary size");

  TrainArgs ta;
  CLI::App* train = app.add_subcommand("train", "train a model");
  train->add_option("--model", ta.modelPath, "model file to write")->required();
  train->add_option("--train-sets", ta.trainSets, "source file(s) then target file")->required();
  train->add_option("--vocabs", ta.vocabs, "vocabulary per training file")->required();
  train->add_option("--arch", ta.arch,
                    "s2s-shallow | s2s-deep | transformer | lm | ape-dual | hard-att | custom");
  train->add_option("--custom-encoders", ta.customEncoders, "encoder kinds for --arch custom");
  train->add_option("--custom-decoder", ta.customDecoder, "decoder kind for --arch custom");
  train->add_option("--emb-dim", ta.embDim, "embedding dimension");
  train->add_option("--state-dim", ta.stateDim, "recurrent state dimension");
  train->add_option("--heads", ta.heads, "attention heads");
  train->add_option("--layers", ta.layers, "transformer depth");
  train->add_option("--dropout", ta.dropout, "dropout probability");
  train->add_option("--tying", ta.tying, "none | source-target | all");
  train->add_flag("--layer-norm", ta.layerNorm, "layer normalization");
  train->add_flag("--right-left", ta.rightLeft, "train on inverted target sentences");
  train->add_flag("--post-norm", ta.postNorm, "post-norm transformer blocks");
  train->add_option("--epochs", ta.epochs, "training epochs");
  train->add_option("--max-updates", ta.maxUpdates, "stop after this many updates");
  train->add_option("--mini-batch-tokens", ta.miniBatchTokens, "token budget per batch");
  train->add_option("--workers", ta.workers, "data-parallel workers");
  train->add_flag("--async", ta.async, "asynchronous updates instead of synchronous");
  train->add_option("--lr", ta.lrBase, "base learning rate");
  train->add_option("--warmup", ta.warmup, "learning-rate warmup steps");
  train->add_option("--average-beta", ta.averageBeta, "parameter averaging decay");
  train->add_option("--save-every", ta.saveEvery, "checkpoint every N updates");
  train->add_option("--resume", ta.resume, "checkpoint to resume from");
  train->add_option("--log-every", ta.logEvery, "log every N updates");
  train->add_flag("--quiet", ta.quiet, "suppress progress output");
  train->add_option("--seed", ta.seed, "random seed (default: MTK_SEED or 1)");
  std::string trainConfig;
  train->add_option("--config", trainConfig, "options file (key: value per line)");

  TranslateArgs xa;
  CLI::App* translate = app.add_subcommand("translate", "translate text");
  translate->add_option("--models", xa.models, "model file(s); several = ensemble")->required();
  translate->add_option("--vocabs", xa.vocabs, "source vocab(s) then target vocab")->required();
  translate->add_option("--input", xa.inputs, "input file per source stream")->required();
  translate->add_option("--output", xa.output, "output file ('-' = stdout)");
  translate->add_option("--n-best-file", xa.nBestFile, "write the n-best list here");
  translate->add_option("--beam-size", xa.beamSize, "beam size");
  translate->add_option("--alpha", xa.alpha, "length normalization exponent");
  translate->add_option("--n-best", xa.nBest, "hypotheses per sentence in the n-best list");
  translate->add_option("--mini-batch-tokens", xa.miniBatchTokens, "token budget per batch");
  translate->add_option("--max-length-factor", xa.maxLengthFactor,
                        "output length cap as a multiple of the source length");
  std::string translateConfig;
  translate->add_option("--config", translateConfig, "options file (key: value per line)");

  ScoreArgs sa;
  CLI::App* score = app.add_subcommand("score", "force-decode and print log-probabilities");
  score->add_option("--model", sa.model, "model file")->required();
  score->add_option("--vocabs", sa.vocabs, "vocabulary per input file")->required();
  score->add_option("--input", sa.inputs, "source file(s) then target file")->required();
  score->add_option("--output", sa.output, "output file ('-' = stdout)");
  score->add_option("--mini-batch-tokens", sa.miniBatchTokens, "token budget per batch");

  RescoreArgs ra;
  CLI::App* rescore = app.add_subcommand("rescore", "re-rank an n-best list");
  rescore->add_option("--nbest", ra.nBestIn, "n-best list to re-rank")->required();
  rescore->add_option("--models", ra.models, "additional scoring model(s)");
  rescore->add_option("--vocabs", ra.vocabs, "source vocab(s) then target vocab")->required();
  rescore->add_option("--input", ra.inputs, "source file per stream")->required();
  rescore->add_option("--weight", ra.weightSpecs, "component weight as name=value");
  rescore->add_option("--output", ra.output, "output file ('-' = stdout)");
  rescore->add_option("--alpha", ra.alpha, "length normalization exponent");
  rescore->add_option("--mini-batch-tokens", ra.miniBatchTokens, "token budget per batch");

  BleuArgs ba;
  CLI::App* bleu = app.add_subcommand("bleu", "corpus BLEU of hypotheses against references");
  bleu->add_option("--hypotheses", ba.hypotheses, "hypothesis file")->required();
  bleu->add_option("--references", ba.references, "reference file")->required();
  bleu->add_option("--max-n", ba.maxN, "highest n-gram order");

  std::vector<std::string> args(argv + 1, argv + argc);
  try {
    if(!args.empty()) {
      CLI::App* sub = app.get_subcommand_no_throw(args[0]);
      if(sub)
        expandConfigFile(sub, args);
    }
    std::reverse(args.begin(), args.end());
    app.parse(args);
  } catch(const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch(const CLI::ParseError& e) {
    std::cerr << e.what() << "\n";
    return 1;
  } catch(const DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 2;
  } catch(const IoError& e) {
    std::cerr << "io error: " << e.what() << "\n";
    return 2;
  }

  try {
    if(vocab->parsed())
      return runVocab(va);
    if(train->parsed())
      return runTrain(ta);
    if(translate->parsed())
      return runTranslate(xa);
    if(score->parsed())
      return runScore(sa);
    if(rescore->parsed())
      return runRescore(ra);
    if(bleu->parsed())
      return runBleu(ba);
    std::cerr << "no subcommand given\n";
    return 1;
  } catch(const DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 2;
  } catch(const IoError& e) {
    std::cerr << "io error: " << e.what() << "\n";
    return 2;
  } catch(const NumericError& e) {
    std::cerr << "numeric error: " << e.what() << "\n";
    return 3;
  } catch(const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
