#pragma once

// Bounded MPMC queue. push() blocks while full; push_drop_oldest() evicts
// the head instead. close() wakes every waiter; pop() then drains what is
// left and returns nullopt.

#include <chrono>
#include <condition_variable>
#include <cstddef>
#include <deque>
#include <mutex>
#include <optional>

namespace mw {

template <class T>
class BoundedQueue {
public:
    explicit BoundedQueue(std::size_t capacity) : cap_(capacity == 0 ? 1 : capacity) {}

    // False if the queue was closed.
    bool push(T v) {
        std::unique_lock lk(mu_);
        not_full_.wait(lk, [&] { return closed_ || q_.size() < cap_; });
        if (closed_) return false;
        q_.push_back(std::move(v));
        not_empty_.notify_one();
        return true;
    }

    // Returns the number of evicted items.
    std::size_t push_drop_oldest(T v) {
        std::lock_guard lk(mu_);
        if (closed_) return 0;
        std::size_t dropped = 0;
        while (q_.size() >= cap_) {
            q_.pop_front();
            ++dropped;
        }
        q_.push_back(std::move(v));
        dropped_ += dropped;
        not_empty_.notify_one();
        return dropped;
    }

    std::optional<T> pop() {
        std::unique_lock lk(mu_);
        not_empty_.wait(lk, [&] { return closed_ || !q_.empty(); });
        return take(lk);
    }

    template <class Rep, class Period>
    std::optional<T> pop_for(std::chrono::duration<Rep, Period> d) {
        std::unique_lock lk(mu_);
        not_empty_.wait_for(lk, d, [&] { return closed_ || !q_.empty(); });
        return take(lk);
    }

    std::optional<T> try_pop() {
        std::unique_lock lk(mu_);
        return take(lk);
    }

    void close() {
        std::lock_guard lk(mu_);
        closed_ = true;
        not_full_.notify_all();
        not_empty_.notify_all();
    }

    bool closed() const {
        std::lock_guard lk(mu_);
        return closed_;
    }
    std::size_t size() const {
        std::lock_guard lk(mu_);
        return q_.size();
    }
    std::size_t capacity() const { return cap_; }
    std::size_t dropped() const {
        std::lock_guard lk(mu_);
        return dropped_;
    }

private:
    std::optional<T> take(std::unique_lock<std::mutex>&) {
        if (q_.empty()) return std::nullopt;
        T v = std::move(q_.front());
        q_.pop_front();
        not_full_.notify_one();
        return v;
    }

    const std::size_t cap_;
    mutable std::mutex mu_;
    std::condition_variable not_full_, not_empty_;
    std::deque<T> q_;
    bool closed_ = false;
    std::size_t dropped_ = 0;
};

}  // namespace mw
